"""Backward warping in a few lines.

A flow stores, for every output pixel, where in the source to read from.
Here we shift a striped garment, squeeze it to half height, and hide part
of it behind an occluder.
"""

import numpy as np

from flowweld import flow as fl
from flowweld import synth

garment = synth.default_garment()
h, w = garment.mask.shape

# every output pixel reads two pixels to its right: the garment moves left
shift = np.stack([np.full((h, w), 2.0), np.zeros((h, w))])
moved = fl.warp_mask(garment.mask, shift)
print("garment columns before:", np.flatnonzero(garment.mask.any(axis=0))[[0, -1]])
print("garment columns after: ", np.flatnonzero(moved.any(axis=0))[[0, -1]])

# half-height squeeze about the garment centre, with its exact backward flow
scene = synth.build_scene("scale", sy=0.5, sx=1.0)
print("extents source -> target:", fl.mask_extents(scene.source_mask), fl.mask_extents(scene.target_mask))
r = fl.extent_ratio(fl.mask_extents(scene.source_mask), fl.mask_extents(scene.target_mask))
print("neighbour spacing the warp should produce (vertical):", r)
print("spacing of the exact flow:", np.unique(np.diff(scene.gt_flow[1], axis=0) + 1)[:3])

# occlusion: output * (1 - vis); the hidden pixels carry no gradient back to the flow
hand = synth.build_scene("hand")
out = fl.apply_visibility(fl.warp(hand.source, fl.zero_flow(h, w)), hand.visibility)
print("max value under the occluder:", out[:, hand.visibility > 0.5].max())

# coarse-to-fine: upsampling doubles the displacements as well as the size
coarse = np.zeros((2, 1, 2))
coarse[0, 0] = [0.0, 2.0]
print("upsampled dx row:", fl.upsample_flow(coarse)[0, 0])
