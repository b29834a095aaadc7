"""Plain-text image emission: PGM/PPM files, mask overlays, crops, curves.

ASCII PGM (P2) and PPM (P3) keep the outputs diffable and dependency
free. Gray values are clamped to [0, 1] before quantisation to 255
levels.
"""

from pathlib import Path

import numpy as np

from .errors import DimensionError


def to_gray255(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """img is (H, W) float in [0, 1] or uint8."""
    gray = img if img.dtype == np.uint8 else to_gray255(img)
    if gray.ndim != 2:
        raise DimensionError("write_pgm expects a 2-d image")
    h, w = gray.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_ppm(path, rgb: np.ndarray) -> None:
    """rgb is (H, W, 3) float in [0, 1] or uint8."""
    px = rgb if rgb.dtype == np.uint8 else to_gray255(rgb)
    if px.ndim != 3 or px.shape[2] != 3:
        raise DimensionError("write_ppm expects a (H, W, 3) image")
    h, w, _ = px.shape
    lines = ["P3", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row.reshape(-1)) for row in px]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def upscale_nearest(mask: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)


def overlay_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Red-tint the active cells of a low-resolution mask on a gray image.

    The mask is upscaled to the image resolution with nearest neighbour.
    An all-zero mask leaves every pixel value unmodified (the output is
    just the gray image replicated onto three channels).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise DimensionError("overlay_mask expects a single-channel image")
    h_img, w_img = image.shape
    h, w = mask.shape
    if h_img % h or w_img % w:
        raise DimensionError(f"mask {mask.shape} does not tile image {image.shape}")
    big = upscale_nearest(mask.astype(bool), h_img // h)
    gray = to_gray255(image).astype(np.float64)
    rgb = np.stack([gray, gray, gray], axis=2)
    rgb[big, 0] = np.rint(0.5 * rgb[big, 0] + 0.5 * 255.0)
    rgb[big, 1] = np.rint(0.4 * rgb[big, 1])
    rgb[big, 2] = np.rint(0.4 * rgb[big, 2])
    return rgb.astype(np.uint8)


def crop(image: np.ndarray, rect) -> np.ndarray:
    """Cut the (r0, r1, c0, c1) rectangle out of a single-channel image."""
    r0, r1, c0, c1 = rect
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    return image[r0:r1, c0:c1]


def hstack_panels(panels: list, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Place equally-tall gray panels side by side with a separator gap."""
    height = max(p.shape[0] for p in panels)
    padded = []
    for p in panels:
        if p.shape[0] < height:
            p = np.pad(p, ((0, height - p.shape[0]), (0, 0)), constant_values=fill)
        padded.append(p)
    gap = np.full((height, pad), fill)
    out = padded[0]
    for p in padded[1:]:
        out = np.concatenate([out, gap, p], axis=1)
    return out


def curve_pgm(xs, ys, width: int = 384, height: int = 256) -> np.ndarray:
    """Rasterise a polyline (e.g. AAP versus tau) onto a white canvas."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size != ys.size or xs.size == 0:
        raise DimensionError("curve_pgm needs matching non-empty x and y")
    canvas = np.ones((height, width))
    margin = 16
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    xspan = (x1 - x0) or 1.0
    yspan = (y1 - y0) or 1.0

    def to_px(x, y):
        col = margin + (x - x0) / xspan * (width - 2 * margin - 1)
        row = height - 1 - margin - (y - y0) / yspan * (height - 2 * margin - 1)
        return int(round(row)), int(round(col))

    # axes box
    canvas[margin, margin:width - margin] = 0.6
    canvas[height - 1 - margin, margin:width - margin] = 0.6
    canvas[margin:height - margin, margin] = 0.6
    canvas[margin:height - margin, width - 1 - margin] = 0.6

    points = [to_px(x, y) for x, y in zip(xs, ys)]
    for (r0, c0), (r1, c1) in zip(points, points[1:]):
        steps = max(abs(r1 - r0), abs(c1 - c0), 1)
        for s in range(steps + 1):
            t = s / steps
            canvas[int(round(r0 + t * (r1 - r0))), int(round(c0 + t * (c1 - c0)))] = 0.0
    for r, c in points:
        canvas[max(0, r - 1):r + 2, max(0, c - 1):c + 2] = 0.0
    return canvas
