"""Structural classification of final crystal states.

The primary classifier is geometric: it reads the sign of each ion's
weak-axis coordinate and counts breaks in the zigzag alternation. A second,
image-based path renders the crystal as a camera would see it and matches
normalized 2D Fourier magnitudes against a library of reference
configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import EmptyBatchError, ShapeError

WEAK, STRONG, AXIAL = 0, 1, 2


class CrystalClass(str, Enum):
    LINEAR = "Linear"
    ZIGZAG = "ZigZag"
    ZAGZIG = "ZagZig"
    SINGLE_KINK = "SingleKink"
    DOUBLE_KINK = "DoubleKink"
    AMBIGUOUS = "Ambiguous"


_BY_COUNT = {1: CrystalClass.SINGLE_KINK, 2: CrystalClass.DOUBLE_KINK}


@dataclass(frozen=True)
class CrystalConfiguration:
    cls: CrystalClass
    kink_count: int | None  # None when Ambiguous
    kink_sites: tuple[int, ...] = ()

    def __post_init__(self):
        expected = {
            CrystalClass.LINEAR: 0,
            CrystalClass.ZIGZAG: 0,
            CrystalClass.ZAGZIG: 0,
            CrystalClass.SINGLE_KINK: 1,
            CrystalClass.DOUBLE_KINK: 2,
        }
        if self.cls in expected and self.kink_count != expected[self.cls]:
            raise ValueError(f"{self.cls.value} requires kink_count {expected[self.cls]}")
        if self.cls is CrystalClass.LINEAR and self.kink_sites:
            raise ValueError("a linear chain has no kink sites")

    @property
    def is_defect(self) -> bool:
        return self.cls in (CrystalClass.SINGLE_KINK, CrystalClass.DOUBLE_KINK)


@dataclass(frozen=True)
class ClassifierThresholds:
    displaced_fraction: float = 0.3
    ambiguity_margin: float = 0.1
    edge_exclusion: float = 0.3

    def __post_init__(self):
        if not 0 < self.ambiguity_margin < self.displaced_fraction < 1:
            raise ValueError("need 0 < ambiguity_margin < displaced_fraction < 1")


@dataclass
class StaggeredOrder:
    retained: np.ndarray  # indices (in axial order) of ions used for classification
    signs: np.ndarray  # +1/-1 weak-axis sign per retained ion, 0 where indeterminate
    indeterminate: np.ndarray  # bool per retained ion

    @property
    def staggered(self) -> np.ndarray:
        """signs * (-1)^k: constant across a perfect zigzag, flips at a kink."""
        return self.signs * (-1) ** np.arange(len(self.signs))


def _axial_sorted(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=float)
    return pos[np.argsort(pos[:, AXIAL], kind="stable")]


def retained_ions(reference_amplitudes, thresholds: ClassifierThresholds) -> np.ndarray:
    a = np.asarray(reference_amplitudes, dtype=float)
    return np.flatnonzero(a >= thresholds.edge_exclusion * a.max())


def staggered_order(positions, reference_amplitudes,
                    thresholds: ClassifierThresholds = ClassifierThresholds()) -> StaggeredOrder:
    """Weak-axis signs of the retained ions, ions taken in axial order.

    ``positions`` is (N, 3) with columns (weak, strong, axial), in the same
    length unit as ``reference_amplitudes``.
    """
    pos = _axial_sorted(positions)
    amp = np.asarray(reference_amplitudes, dtype=float)
    keep = retained_ions(amp, thresholds)
    u = pos[keep, WEAK]
    indet = np.abs(u) < thresholds.ambiguity_margin * amp[keep]
    signs = np.where(indet, 0, np.sign(u)).astype(int)
    return StaggeredOrder(keep, signs, indet)


def count_kinks(signs) -> tuple[int, tuple[int, ...]]:
    """Adjacent equal-sign pairs of a fully determinate sign sequence.

    A kink site is the index ``k`` of the gap between elements k and k+1.
    """
    s = np.asarray(signs)
    sites = np.flatnonzero(s[1:] == s[:-1])
    return len(sites), tuple(int(k) for k in sites)


def _bridged_kinks(order: StaggeredOrder):
    """Kink count across isolated indeterminate ions, or None if a sign is needed.

    An indeterminate ion flanked by determinate neighbours is skipped: the
    neighbours' staggered signs agree when the pair bracketing it contains
    no kink and differ when it holds one, which is then placed on the gap
    left of the indeterminate ion. Indeterminate ions at either end of the
    retained range, or two in a row, make the count undecidable.
    """
    s = order.signs
    m = len(s)
    if m == 0 or s[0] == 0 or s[-1] == 0:
        return None
    sites = []
    k = 0
    while k < m - 1:
        if s[k + 1] != 0:
            if s[k + 1] == s[k]:
                sites.append(k)
            k += 1
            continue
        if k + 2 >= m or s[k + 2] == 0:
            return None
        # staggered signs two apart: equal raw signs across the bridge means no kink
        if s[k + 2] != s[k]:
            sites.append(k)
        k += 2
    return len(sites), tuple(sites)


def classify_configuration(positions, reference_amplitudes,
                           thresholds: ClassifierThresholds = ClassifierThresholds()) -> CrystalConfiguration:
    """Classify one crystal snapshot.

    Displacement (the Linear test) uses the full transverse distance from the
    trap axis, since kinks in a near-isotropic trap twist into the strong
    axis; alternation uses the weak-axis sign only.
    """
    pos = _axial_sorted(positions)
    amp = np.asarray(reference_amplitudes, dtype=float)
    order = staggered_order(pos, amp, thresholds)
    keep = order.retained
    transverse = np.hypot(pos[keep, WEAK], pos[keep, STRONG])
    displaced = transverse >= thresholds.displaced_fraction * amp[keep]
    if displaced.sum() < 0.5 * len(keep):
        return CrystalConfiguration(CrystalClass.LINEAR, 0)
    counted = _bridged_kinks(order)
    if counted is None:
        return CrystalConfiguration(CrystalClass.AMBIGUOUS, None)
    n, sites = counted
    if n == 0:
        first = order.signs[order.signs != 0][0]
        return CrystalConfiguration(CrystalClass.ZIGZAG if first > 0 else CrystalClass.ZAGZIG, 0)
    if n in _BY_COUNT:
        return CrystalConfiguration(_BY_COUNT[n], n, sites)
    return CrystalConfiguration(CrystalClass.AMBIGUOUS, None, sites)


def defect_density(n1: int, n2: int, n_total: int) -> float:
    """(n1 + 2 n2) / N over classified (non-rejected) samples."""
    if n_total <= 0:
        raise EmptyBatchError("defect density of an empty batch")
    if n1 < 0 or n2 < 0 or n1 + n2 > n_total:
        raise ValueError("need 0 <= n1, n2 and n1 + n2 <= n_total")
    return (n1 + 2 * n2) / n_total


# ---------------------------------------------------------------------------
# synthetic imaging


@dataclass(frozen=True)
class ImagingGeometry:
    """Camera model: pixel grid centred on the trap axis, viewing at ``angle``
    to the weak-axis (zigzag) plane. Image columns run along the trap axis."""

    pixel_pitch: float = 2.2e-6
    angle: float = math.pi / 4
    shape: tuple[int, int] = (17, 65)  # (rows, cols)
    psf_sigma: float = 1.5e-6

    def project(self, positions) -> tuple[np.ndarray, np.ndarray]:
        """(vertical, horizontal) camera-plane coordinates in metres."""
        pos = np.asarray(positions, dtype=float)
        vertical = pos[:, WEAK] * math.sin(self.angle) - pos[:, STRONG] * math.cos(self.angle)
        return vertical, pos[:, AXIAL]

    @property
    def extent(self) -> tuple[float, float]:
        rows, cols = self.shape
        return rows * self.pixel_pitch, cols * self.pixel_pitch


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # (rows, cols), >= 0
    pixel_pitch: float = 2.2e-6
    angle: float = math.pi / 4
    truncated: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if not np.all(np.isfinite(self.pixels)) or np.any(self.pixels < 0):
            raise ValueError("image intensities must be finite and non-negative")

    @property
    def shape(self):
        return self.pixels.shape


def _pixel_integrals(centres, sigma, n, pitch):
    edges = (np.arange(n + 1) - n / 2) * pitch
    cdf = 0.5 * (1 + erf((edges[None, :] - centres[:, None]) / (math.sqrt(2) * sigma)))
    return np.diff(cdf, axis=1)


def render_synthetic_image(positions, psf_sigma: float | None = None,
                           geometry: ImagingGeometry = ImagingGeometry(),
                           photons_per_ion: float | None = None,
                           rng: np.random.Generator | None = None) -> SyntheticImage:
    """Sum of pixel-integrated Gaussian spots, one per ion (unit integral each).

    With ``photons_per_ion`` the image is scaled to photon counts and Poisson
    shot noise is drawn from ``rng``. Ions outside the field of view are
    rendered partially (or not at all) and flag the image as truncated.
    """
    sigma = geometry.psf_sigma if psf_sigma is None else psf_sigma
    rows, cols = geometry.shape
    v, h = geometry.project(positions)
    height, width = geometry.extent
    truncated = bool(np.any(np.abs(v) > height / 2) or np.any(np.abs(h) > width / 2))
    # image row 0 at the top: positive vertical coordinate maps to small row index
    pr = _pixel_integrals(-v, sigma, rows, geometry.pixel_pitch)
    pc = _pixel_integrals(h, sigma, cols, geometry.pixel_pitch)
    img = pr.T @ pc
    if photons_per_ion is not None:
        rng = rng if rng is not None else np.random.default_rng()
        img = rng.poisson(img * photons_per_ion).astype(float)
    return SyntheticImage(img, geometry.pixel_pitch, geometry.angle, truncated)


def write_pgm(path, image: SyntheticImage, maxval: int = 65535) -> None:
    """Binary portable graymap (P5), scaled so the brightest pixel is ``maxval``."""
    px = image.pixels
    peak = px.max()
    scaled = np.zeros_like(px) if peak <= 0 else px / peak * maxval
    data = np.round(scaled).astype(">u2" if maxval > 255 else "u1")
    rows, cols = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# pixel_pitch_m {image.pixel_pitch:.6g}\n{cols} {rows}\n{maxval}\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode())
        pos = end
    pos += 1
    magic, cols, rows, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"not a binary graymap: {magic}")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[pos:], dtype=dtype, count=rows * cols).reshape(rows, cols).astype(float)


# ---------------------------------------------------------------------------
# Fourier-template classification


@dataclass(frozen=True)
class ReferenceConfiguration:
    label: str
    cls: CrystalClass
    kink_count: int
    signs: tuple[int, ...]  # weak-axis sign per ion in axial order (0 = on axis)


@dataclass
class TemplateLibrary:
    configurations: list[ReferenceConfiguration]
    templates: np.ndarray  # (K, rows, cols) unit-energy Fourier magnitudes
    threshold: float = np.inf
    images: np.ndarray = field(default=None, repr=False)  # normalized real-space renders

    def __post_init__(self):
        if len(self.configurations) != len(self.templates):
            raise ValueError("one template per configuration")

    def __len__(self):
        return len(self.configurations)


@dataclass(frozen=True)
class TemplateMatch:
    cls: CrystalClass
    kink_count: int | None
    ssr: float
    rejected: bool
    label: str = ""


def fourier_magnitude(pixels) -> np.ndarray | None:
    """Unit-energy 2D Fourier magnitude; None for an image with no signal."""
    f = np.abs(np.fft.fft2(np.asarray(pixels, dtype=float)))
    norm = np.sqrt(np.sum(f**2))
    if not norm > 0:
        return None
    return f / norm


def reference_sign_patterns(n_ions: int, retained: np.ndarray, n_classes: int = 14):
    """Linear, both zigzags, single kinks at mirror-distinct gaps, then symmetric
    double kinks, until ``n_classes`` configurations exist."""
    base = np.array([(-1) ** i for i in range(n_ions)])
    first = retained[0]
    zig = base * base[first]  # leftmost retained ion positive
    configs = [
        ReferenceConfiguration("linear", CrystalClass.LINEAR, 0, (0,) * n_ions),
        ReferenceConfiguration("zigzag", CrystalClass.ZIGZAG, 0, tuple(int(s) for s in zig)),
        ReferenceConfiguration("zagzig", CrystalClass.ZAGZIG, 0, tuple(int(s) for s in -zig)),
    ]
    gaps = len(retained) - 1

    def kinked(sites):
        s = zig.copy()
        for g in sites:
            s[retained[g + 1]:] *= -1  # flip everything right of the gap
        return tuple(int(v) for v in s)

    for g in range((gaps + 1) // 2):
        if len(configs) >= n_classes:
            break
        configs.append(ReferenceConfiguration(f"single_kink_gap{g}", CrystalClass.SINGLE_KINK, 1, kinked([g])))
    g = (gaps - 1) // 2
    while len(configs) < n_classes and g >= 0:
        pair = (g, gaps - 1 - g)
        if pair[0] < pair[1]:
            configs.append(ReferenceConfiguration(
                f"double_kink_gaps{pair[0]}_{pair[1]}", CrystalClass.DOUBLE_KINK, 2, kinked(pair)))
        g -= 1
    g1 = 0
    while len(configs) < n_classes and g1 < gaps:
        # fall back to asymmetric pairs for short chains
        for g2 in range(g1 + 1, gaps):
            label = f"double_kink_gaps{g1}_{g2}"
            if len(configs) < n_classes and label not in {c.label for c in configs}:
                configs.append(ReferenceConfiguration(label, CrystalClass.DOUBLE_KINK, 2, kinked((g1, g2))))
        g1 += 1
    return configs


def configuration_positions(reference: ReferenceConfiguration, axial, amplitudes) -> np.ndarray:
    """Ideal positions for a reference configuration (same units as inputs)."""
    n = len(axial)
    pos = np.zeros((n, 3))
    pos[:, AXIAL] = axial
    pos[:, WEAK] = np.asarray(reference.signs) * np.asarray(amplitudes)
    return pos


def build_reference_templates(axial, amplitudes, geometry: ImagingGeometry = ImagingGeometry(),
                              thresholds: ClassifierThresholds = ClassifierThresholds(),
                              n_classes: int = 14) -> TemplateLibrary:
    """Templates from ideal renders of the reference configurations.

    ``axial`` and ``amplitudes`` (metres) describe the zigzag ground state at
    the final trap, as returned by the statics module.
    """
    amplitudes = np.asarray(amplitudes, dtype=float)
    retained = retained_ions(amplitudes, thresholds)
    configs = reference_sign_patterns(len(axial), retained, n_classes)
    templates, images = [], []
    for ref in configs:
        img = render_synthetic_image(configuration_positions(ref, axial, amplitudes), geometry=geometry).pixels
        templates.append(fourier_magnitude(img))
        images.append(img / np.sqrt(np.sum(img**2)))
    return TemplateLibrary(configs, np.array(templates), np.inf, np.array(images))


def _mirror_spectrum(spec: np.ndarray) -> np.ndarray:
    """Fourier magnitude of the image reflected across the trap axis."""
    return np.roll(spec[::-1], 1, axis=0)


def _ssr(library: TemplateLibrary, pixels) -> np.ndarray | None:
    """Residual against each template, minimized over the image and its mirror.

    The magnitude is already invariant under point reflection, so this makes
    every class closed under both single reflections of the crystal.
    """
    spec = fourier_magnitude(pixels)
    if spec is None:
        return None
    direct = np.sum((library.templates - spec[None]) ** 2, axis=(1, 2))
    mirrored = np.sum((library.templates - _mirror_spectrum(spec)[None]) ** 2, axis=(1, 2))
    return np.minimum(direct, mirrored)


def fourier_template_classify(image: SyntheticImage | np.ndarray, library: TemplateLibrary) -> TemplateMatch:
    """Nearest reference spectrum by sum of squared residuals.

    Mirror-image configurations share a Fourier magnitude; zigzag versus
    zag-zig is settled by real-space overlap with the two reference renders.
    """
    pixels = image.pixels if isinstance(image, SyntheticImage) else np.asarray(image, dtype=float)
    if pixels.shape != library.templates.shape[1:]:
        raise ShapeError(f"image shape {pixels.shape} does not match templates {library.templates.shape[1:]}")
    ssr = _ssr(library, pixels)
    if ssr is None:
        return TemplateMatch(CrystalClass.AMBIGUOUS, None, math.inf, True, "empty")
    k = int(np.argmin(ssr))
    ref = library.configurations[k]
    cls = ref.cls
    if cls in (CrystalClass.ZIGZAG, CrystalClass.ZAGZIG) and library.images is not None:
        labels = [c.cls for c in library.configurations]
        iz, ia = labels.index(CrystalClass.ZIGZAG), labels.index(CrystalClass.ZAGZIG)
        cls = CrystalClass.ZIGZAG if np.sum(pixels * library.images[iz]) >= np.sum(pixels * library.images[ia]) \
            else CrystalClass.ZAGZIG
    rejected = bool(ssr[k] > library.threshold)
    if rejected:
        return TemplateMatch(CrystalClass.AMBIGUOUS, None, float(ssr[k]), True, ref.label)
    return TemplateMatch(cls, ref.kink_count, float(ssr[k]), False, ref.label)


def calibrate_threshold(library: TemplateLibrary, images, reject_fraction: float = 0.01) -> float:
    """Recognition threshold rejecting ``reject_fraction`` of the given renders.

    The default keeps rejections well under 5% of clean renders.
    """
    best = []
    for img in images:
        pixels = img.pixels if isinstance(img, SyntheticImage) else img
        ssr = _ssr(library, pixels)
        best.append(np.inf if ssr is None else ssr.min())
    theta = float(np.quantile(best, 1.0 - reject_fraction, method="higher"))
    library.threshold = theta
    return theta
