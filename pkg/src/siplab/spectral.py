"""2-D discrete Fourier transforms on the tape.

Normalization follows numpy's default ("backward"): the forward transform
is unnormalized and the inverse carries ``1/N`` with ``N = h*w``, so
``sum |x|^2 == sum |X|^2 / N`` (Parseval).  ``norm="ortho"`` is available for
callers that want a unitary transform.  Any grid size is accepted; numpy's
pocketfft backend is mixed-radix, so 80x60 is exact without padding.

The adjoint of ``fft2`` under norm ``n`` is ``ifft2`` under the dual norm
(``backward <-> forward``, ``ortho <-> ortho``) and vice versa.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, custom_vjp

_DUAL = {"backward": "forward", "forward": "backward", "ortho": "ortho"}


def fft2(x, norm: str = "backward") -> Tensor:
    """Transform the last two axes; the result holds complex coefficients."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"fft2 needs at least two axes, got shape {x.shape}")
    real_input = not np.iscomplexobj(x.data)
    out = np.fft.fft2(x.data, norm=norm)

    def vjp(g):
        gx = np.fft.ifft2(g, norm=_DUAL[norm])
        return (gx.real if real_input else gx,)

    return custom_vjp("fft2", out, (x,), vjp)


def ifft2(spec, norm: str = "backward") -> Tensor:
    """Inverse of :func:`fft2`; the result stays complex until :func:`real`."""
    spec = as_tensor(spec)
    out = np.fft.ifft2(spec.data, norm=norm)
    return custom_vjp("ifft2", out, (spec,), lambda g: (np.fft.fft2(g, norm=_DUAL[norm]),))


def real(z) -> Tensor:
    z = as_tensor(z)
    return custom_vjp("real", np.ascontiguousarray(z.data.real), (z,), lambda g: (g.astype(np.complex128),))


def abs2(z) -> Tensor:
    """Squared magnitude ``|z|^2`` as a real tensor."""
    z = as_tensor(z)
    zd = z.data
    return custom_vjp("abs2", (zd * np.conj(zd)).real, (z,), lambda g: (2.0 * g * zd,))


def integer_frequencies(n: int) -> np.ndarray:
    """Signed integer frequencies in FFT storage order, e.g. 0, 1, ..., -2, -1."""
    return np.fft.fftfreq(n, d=1.0 / n).round().astype(int)


def wavenumber_squared(shape: tuple[int, int], spacing: float = 1.0) -> np.ndarray:
    """``|k|^2`` with ``k = 2*pi*n/(N*spacing)`` for each bin of a grid of ``shape``."""
    ky = 2.0 * np.pi * np.fft.fftfreq(shape[0], d=spacing)
    kx = 2.0 * np.pi * np.fft.fftfreq(shape[1], d=spacing)
    return ky[:, None] ** 2 + kx[None, :] ** 2


def frequency_magnitude(shape: tuple[int, int]) -> np.ndarray:
    """``|n|`` of the integer frequency pair of each bin."""
    ny = integer_frequencies(shape[0])
    nx = integer_frequencies(shape[1])
    return np.sqrt(ny[:, None] ** 2 + nx[None, :] ** 2)
