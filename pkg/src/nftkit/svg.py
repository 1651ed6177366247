"""Minimal SVG rasterization through the system librsvg + cairo.

No maintained pure-Python SVG rasterizer exists, so this binds the two
shared libraries that ship with most Linux distributions directly via
ctypes.  :func:`available` reports whether the libraries could be
loaded; callers degrade gracefully when they cannot.
"""

from __future__ import annotations

import ctypes
import ctypes.util

import numpy as np

__all__ = ["available", "rasterize"]

_CAIRO_FORMAT_ARGB32 = 0


class _RsvgDimensionData(ctypes.Structure):
    _fields_ = [
        ("width", ctypes.c_int),
        ("height", ctypes.c_int),
        ("em", ctypes.c_double),
        ("ex", ctypes.c_double),
    ]


def _load() -> tuple | None:
    try:
        rsvg_name = ctypes.util.find_library("rsvg-2")
        cairo_name = ctypes.util.find_library("cairo")
        if not rsvg_name or not cairo_name:
            return None
        rsvg = ctypes.CDLL(rsvg_name)
        cairo = ctypes.CDLL(cairo_name)
    except OSError:
        return None

    rsvg.rsvg_handle_new_from_data.restype = ctypes.c_void_p
    rsvg.rsvg_handle_new_from_data.argtypes = [
        ctypes.c_char_p,
        ctypes.c_size_t,
        ctypes.POINTER(ctypes.c_void_p),
    ]
    rsvg.rsvg_handle_get_dimensions.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(_RsvgDimensionData),
    ]
    rsvg.rsvg_handle_render_cairo.restype = ctypes.c_bool
    rsvg.rsvg_handle_render_cairo.argtypes = [ctypes.c_void_p, ctypes.c_void_p]
    cairo.cairo_image_surface_create.restype = ctypes.c_void_p
    cairo.cairo_image_surface_create.argtypes = [ctypes.c_int, ctypes.c_int, ctypes.c_int]
    cairo.cairo_create.restype = ctypes.c_void_p
    cairo.cairo_create.argtypes = [ctypes.c_void_p]
    cairo.cairo_scale.argtypes = [ctypes.c_void_p, ctypes.c_double, ctypes.c_double]
    cairo.cairo_surface_flush.argtypes = [ctypes.c_void_p]
    cairo.cairo_image_surface_get_data.restype = ctypes.POINTER(ctypes.c_ubyte)
    cairo.cairo_image_surface_get_data.argtypes = [ctypes.c_void_p]
    cairo.cairo_image_surface_get_stride.restype = ctypes.c_int
    cairo.cairo_image_surface_get_stride.argtypes = [ctypes.c_void_p]
    cairo.cairo_destroy.argtypes = [ctypes.c_void_p]
    cairo.cairo_surface_destroy.argtypes = [ctypes.c_void_p]
    return rsvg, cairo


_LIBS = _load()


def available() -> bool:
    return _LIBS is not None


def rasterize(svg_bytes: bytes, width: int) -> np.ndarray:
    """Render SVG bytes to an RGBA array scaled to the given pixel width.

    Raises ValueError when the document cannot be parsed or the
    libraries are missing.
    """
    if _LIBS is None:
        raise ValueError("librsvg/cairo not available on this system")
    rsvg, cairo = _LIBS
    err = ctypes.c_void_p()
    handle = rsvg.rsvg_handle_new_from_data(svg_bytes, len(svg_bytes), ctypes.byref(err))
    if not handle:
        raise ValueError("unparseable SVG document")
    dims = _RsvgDimensionData()
    rsvg.rsvg_handle_get_dimensions(handle, ctypes.byref(dims))
    if dims.width <= 0 or dims.height <= 0:
        raise ValueError(f"SVG reports dimensions {dims.width}x{dims.height}")
    scale = width / dims.width
    height = max(1, round(dims.height * scale))
    surface = cairo.cairo_image_surface_create(_CAIRO_FORMAT_ARGB32, width, height)
    cr = cairo.cairo_create(surface)
    cairo.cairo_scale(cr, scale, scale)
    ok = rsvg.rsvg_handle_render_cairo(handle, cr)
    cairo.cairo_surface_flush(surface)
    if not ok:
        cairo.cairo_destroy(cr)
        cairo.cairo_surface_destroy(surface)
        raise ValueError("SVG render failed")
    stride = cairo.cairo_image_surface_get_stride(surface)
    data = cairo.cairo_image_surface_get_data(surface)
    buf = np.ctypeslib.as_array(data, shape=(height, stride)).copy()
    cairo.cairo_destroy(cr)
    cairo.cairo_surface_destroy(surface)
    pixels = buf.reshape(height, stride // 4, 4)[:, :width, :]
    # cairo ARGB32 on little-endian hosts is premultiplied BGRA in memory
    bgra = pixels.astype(np.float64)
    alpha = bgra[:, :, 3:4]
    with np.errstate(invalid="ignore", divide="ignore"):
        unmul = np.where(alpha > 0, bgra[:, :, :3] * 255.0 / alpha, 0.0)
    rgba = np.empty((height, width, 4), dtype=np.uint8)
    rgba[:, :, 0] = np.clip(unmul[:, :, 2], 0, 255).astype(np.uint8)
    rgba[:, :, 1] = np.clip(unmul[:, :, 1], 0, 255).astype(np.uint8)
    rgba[:, :, 2] = np.clip(unmul[:, :, 0], 0, 255).astype(np.uint8)
    rgba[:, :, 3] = pixels[:, :, 3]
    return rgba
