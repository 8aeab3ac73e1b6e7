"""Polynomial metric certificates: evaluation of W(x), L(x), M(x) and K(x), plus file I/O."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .dynamics import Box

FORMAT_TAG = "ccmpc-certificate"
FORMAT_VERSION = 1
MAX_CONDITION = 1e12


class SingularMetric(ValueError):
    """W(x) is not numerically positive definite at the requested point."""


class CertificateFormatError(ValueError):
    """Certificate file is malformed or fails its checksum."""


def monomial_exponents(n: int, degree: int) -> np.ndarray:
    """Exponent tuples of all monomials in ``n`` variables with total degree <= ``degree``.

    Ordered by total degree, then lexicographically by variable index; the
    constant monomial comes first.
    """
    exps = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            e = [0] * n
            for i in combo:
                e[i] += 1
            exps.append(e)
    return np.array(exps, dtype=int).reshape(-1, n)


def monomials(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.prod(x[..., None, :] ** exps, axis=-1)


def monomial_gradients(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """``d phi_i / d x_k`` with shape ``(..., n_monomials, n)``."""
    x = np.asarray(x, dtype=float)
    n = exps.shape[1]
    out = np.empty(x.shape[:-1] + exps.shape)
    for k in range(n):
        lowered = exps.copy()
        lowered[:, k] = np.maximum(lowered[:, k] - 1, 0)
        out[..., k] = exps[:, k] * np.prod(x[..., None, :] ** lowered, axis=-1)
    return out


@dataclass(frozen=True)
class MetricCertificate:
    """Polynomial pair ``W(x) = sum phi_i(x) W_i``, ``L(x) = sum phi_i(x) L_i``.

    ``M = W^-1`` is the metric and ``K = L W^-1`` the differential feedback gain.
    """

    mode: str
    beta: float
    state_dim: int
    input_dim: int
    dist_dim: int
    w_degree: int
    l_degree: int
    w_coeffs: np.ndarray
    l_coeffs: np.ndarray
    state_box: Box
    margin: float = float("nan")
    m_lower: float = float("nan")
    m_upper: float = float("nan")
    alpha_gain: float | None = None
    synthesis_grid: int = 0
    w_exps: np.ndarray = field(init=False, repr=False, compare=False)
    l_exps: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n, m = self.state_dim, self.input_dim
        object.__setattr__(self, "w_exps", monomial_exponents(n, self.w_degree))
        object.__setattr__(self, "l_exps", monomial_exponents(n, self.l_degree))
        wc = np.asarray(self.w_coeffs, dtype=float).reshape(len(self.w_exps), n, n)
        lc = np.asarray(self.l_coeffs, dtype=float).reshape(len(self.l_exps), m, n)
        wc = 0.5 * (wc + np.swapaxes(wc, -1, -2))
        object.__setattr__(self, "w_coeffs", wc)
        object.__setattr__(self, "l_coeffs", lc)
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"contraction rate must lie in (0, 1], got {self.beta}")

    def w(self, x) -> np.ndarray:
        return np.einsum("...i,ijk->...jk", monomials(x, self.w_exps), self.w_coeffs)

    def l(self, x) -> np.ndarray:
        return np.einsum("...i,ijk->...jk", monomials(x, self.l_exps), self.l_coeffs)

    def w_gradient(self, x) -> np.ndarray:
        """``dW/dx_k`` stacked as ``(..., n, n, n)`` with the derivative index first."""
        g = monomial_gradients(x, self.w_exps)
        return np.einsum("...ik,ijl->...kjl", g, self.w_coeffs)

    def with_l(self, l_coeffs) -> "MetricCertificate":
        return replace(self, l_coeffs=np.asarray(l_coeffs, dtype=float))


def _check_pd(w: np.ndarray) -> np.ndarray:
    """Eigenvalues of a batch of symmetric matrices, raising on near-singularity."""
    lam = np.linalg.eigvalsh(w)
    lo, hi = lam[..., 0], lam[..., -1]
    bad = ~(lo > 0) | (hi > MAX_CONDITION * lo)
    if np.any(bad):
        raise SingularMetric(f"W(x) not positive definite or condition number above {MAX_CONDITION:g}")
    return lam


def metric_at(cert: MetricCertificate, x) -> np.ndarray:
    """``M(x) = W(x)^-1`` via a Cholesky solve; broadcasts over leading axes."""
    w = cert.w(x)
    _check_pd(w)
    c = np.linalg.cholesky(w)
    eye = np.broadcast_to(np.eye(cert.state_dim), w.shape)
    ci = np.linalg.solve(c, eye)
    return np.swapaxes(ci, -1, -2) @ ci


def gain_at(cert: MetricCertificate, x) -> np.ndarray:
    """``K(x) = L(x) W(x)^-1``."""
    return cert.l(x) @ metric_at(cert, x)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _body_lines(cert: MetricCertificate) -> list[str]:
    lines = [
        f"{FORMAT_TAG} v{FORMAT_VERSION}",
        f"mode {cert.mode}",
        f"beta {_fmt(cert.beta)}",
        f"dims {cert.state_dim} {cert.input_dim} {cert.dist_dim}",
        f"degrees {cert.w_degree} {cert.l_degree}",
        f"m_lower {_fmt(cert.m_lower)}",
        f"m_upper {_fmt(cert.m_upper)}",
        f"margin {_fmt(cert.margin)}",
        f"alpha_gain {'none' if cert.alpha_gain is None else _fmt(cert.alpha_gain)}",
        f"synthesis_grid {cert.synthesis_grid}",
        "state_box " + " ".join(_fmt(v) for pair in cert.state_box.as_pairs() for v in pair),
    ]
    for i, (e, c) in enumerate(zip(cert.w_exps, cert.w_coeffs)):
        lines.append(f"W {i} [{','.join(map(str, e))}] " + " ".join(_fmt(v) for v in c.ravel()))
    for i, (e, c) in enumerate(zip(cert.l_exps, cert.l_coeffs)):
        lines.append(f"L {i} [{','.join(map(str, e))}] " + " ".join(_fmt(v) for v in c.ravel()))
    return lines


def dumps(cert: MetricCertificate) -> str:
    body = "\n".join(_body_lines(cert)) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    return body + f"checksum sha256 {digest}\n"


def certificate_id(cert: MetricCertificate) -> str:
    return hashlib.sha256(dumps(cert).encode()).hexdigest()[:16]


def loads(text: str) -> MetricCertificate:
    lines = text.splitlines()
    if not lines or not lines[-1].startswith("checksum sha256 "):
        raise CertificateFormatError("missing checksum line")
    body = "\n".join(lines[:-1]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != lines[-1].split()[-1]:
        raise CertificateFormatError("checksum mismatch")
    try:
        head = lines[0].split()
        if head[0] != FORMAT_TAG or head[1] != f"v{FORMAT_VERSION}":
            raise CertificateFormatError(f"unsupported header {lines[0]!r}")
        kv = {}
        w_rows, l_rows = [], []
        for line in lines[1:-1]:
            key, _, rest = line.partition(" ")
            if key == "W":
                w_rows.append([float(t) for t in rest.split()[2:]])
            elif key == "L":
                l_rows.append([float(t) for t in rest.split()[2:]])
            else:
                kv[key] = rest
        n, m, q = (int(t) for t in kv["dims"].split())
        dw, dl = (int(t) for t in kv["degrees"].split())
        box_vals = [float(t) for t in kv["state_box"].split()]
        alpha = kv["alpha_gain"]
        return MetricCertificate(
            mode=kv["mode"],
            beta=float(kv["beta"]),
            state_dim=n,
            input_dim=m,
            dist_dim=q,
            w_degree=dw,
            l_degree=dl,
            w_coeffs=np.array(w_rows, dtype=float),
            l_coeffs=np.array(l_rows, dtype=float).reshape(len(l_rows), m * n),
            state_box=Box.from_pairs(np.array(box_vals).reshape(-1, 2)),
            margin=float(kv["margin"]),
            m_lower=float(kv["m_lower"]),
            m_upper=float(kv["m_upper"]),
            alpha_gain=None if alpha == "none" else float(alpha),
            synthesis_grid=int(kv["synthesis_grid"]),
        )
    except (KeyError, ValueError, IndexError) as exc:
        if isinstance(exc, CertificateFormatError):
            raise
        raise CertificateFormatError(f"malformed certificate: {exc}") from exc


def save(cert: MetricCertificate, path) -> None:
    Path(path).write_text(dumps(cert), encoding="utf-8", newline="\n")


def load(path) -> MetricCertificate:
    return loads(Path(path).read_text(encoding="utf-8"))


def constant_certificate(w, l, beta: float, state_box=None, dist_dim: int = 0) -> MetricCertificate:
    """Certificate with constant ``W`` and ``L`` (degree zero), handy for tests and scalar examples."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    n = w.shape[0]
    l = np.asarray(l, dtype=float).reshape(-1, n)
    if state_box is None:
        state_box = Box(-np.full(n, 10.0), np.full(n, 10.0))
    lam = np.linalg.eigvalsh(w)
    return MetricCertificate(
        mode="contraction",
        beta=beta,
        state_dim=n,
        input_dim=l.shape[0],
        dist_dim=dist_dim,
        w_degree=0,
        l_degree=0,
        w_coeffs=w[None],
        l_coeffs=l[None],
        state_box=state_box,
        m_lower=1.0 / lam[-1],
        m_upper=1.0 / lam[0] if lam[0] > 0 else float("inf"),
    )
