"""Render a sphere with the soft rasterizer and follow a gradient.

Pushes a sphere sideways in the image by descending a silhouette BCE
against a target mask rendered from a shifted copy. Prints the loss and
the horizontal centre every few steps.
"""
import numpy as np

from sceneprior.autodiff import Adam, Tensor, backward, new_tape, ops, param
from sceneprior.geometry import look_at, project
from sceneprior.render import RasterConfig, mask_iou, rasterize_silhouette, soft_silhouette
from sceneprior.scene import make_icosphere

cam = look_at([0.0, 0.6, 3.5], [0.0, 0.5, 0.0], 48, 48)
cfg = RasterConfig(48, 48)
sphere = make_icosphere(2)
radius = 0.5

target = rasterize_silhouette(sphere.vertices * radius + [0.35, 0.5, 0.0], sphere.faces, cam, cfg).value > 0.5
# only the horizontal offset is free; height and depth stay put
shift = param(np.array([[-0.2]]), "shift")
opt = Adam([shift], lr=0.02)

for step in range(81):
    opt.zero_grad()
    with new_tape():
        verts = Tensor(sphere.vertices * radius + [0.0, 0.5, 0.0]) + shift * np.array([[1.0, 0.0, 0.0]])
        u, v, z, _ = project(verts, cam)
        sil = soft_silhouette(u, v, z.value, sphere.faces, cfg)
        loss = ops.mean(ops.bce(sil, target))
        backward(loss)
    opt.step()
    if step % 10 == 0:
        iou = mask_iou(sil.value > 0.5, target)
        print(f"step {step:3d}  loss {loss.item():.4f}  x {shift.value[0, 0]:+.3f}  IoU {iou:.3f}")

print("target x +0.350")
