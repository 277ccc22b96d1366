"""Multi-domain synthetic reflection data.

A contaminated frame is built in linear space as omega * T^g + phi *
blur_sigma(R^g), clipped and tone-mapped back with exponent 1/g. The
stored ground-truth layers are the tone-mapped attenuated transmission and
the tone-mapped blurred reflection, so layer supervision matches what the
contaminated frame actually contains, and remixing the two layers
reproduces the frame exactly.

Domains are defined by the parameter ranges the per-image draws come
from; the defaults separate three domains mainly along reflection blur
and reflection strength.
"""

import os
from dataclasses import dataclass

import numpy as np

from .imaging import check_image, load_png, save_png
from .nn.kernels import blur2d

__all__ = [
    "DomainSpec",
    "TripletSample",
    "ManifestRecord",
    "DatasetManifest",
    "default_domain_specs",
    "default_target_spec",
    "validate_domain_specs",
    "spec_overlaps",
    "procedural_image",
    "synthesize",
    "generate_dataset",
    "untone",
    "tone",
    "remix",
    "remix_vjp",
]

MANIFEST_HEADER = "# adanec-manifest v1"


# ---------------------------------------------------------------------------
# domain specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainSpec:
    """Synthesis parameter ranges defining one source domain."""

    domain_id: int
    omega_range: tuple  # refractive amplitude, within [0, 1]
    phi_range: tuple    # reflective amplitude, within [0, 1]
    blur_sigma_range: tuple  # reflection blur in pixels, within [0, 8]
    gamma: float = 2.2  # tone curve exponent of the simulated ISP
    base_image_pool: str = "procedural"

    def validate(self):
        for label, (lo, hi), bound in (
            ("omega_range", self.omega_range, 1.0),
            ("phi_range", self.phi_range, 1.0),
            ("blur_sigma_range", self.blur_sigma_range, 8.0),
        ):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError(f"domain {self.domain_id}: {label} bounds must be finite")
            if not (0.0 <= lo <= hi <= bound):
                raise ValueError(
                    f"domain {self.domain_id}: need 0 <= lo <= hi <= {bound} "
                    f"for {label}, got ({lo}, {hi})"
                )
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"domain {self.domain_id}: gamma must be positive")
        return self

    def ranges(self):
        return {
            "omega": tuple(self.omega_range),
            "phi": tuple(self.phi_range),
            "blur": tuple(self.blur_sigma_range),
        }


def default_domain_specs():
    """Three source domains separated along blur and reflection strength."""
    return [
        DomainSpec(0, omega_range=(0.85, 0.95), phi_range=(0.10, 0.25),
                   blur_sigma_range=(0.0, 1.0)),
        DomainSpec(1, omega_range=(0.80, 0.90), phi_range=(0.38, 0.55),
                   blur_sigma_range=(2.0, 3.0)),
        DomainSpec(2, omega_range=(0.78, 0.88), phi_range=(0.70, 0.85),
                   blur_sigma_range=(6.5, 8.0)),
    ]


def default_target_spec():
    """Held-out domain sitting in the gap between the first two sources:
    its strength and blur ranges intersect no source range."""
    return DomainSpec(0, omega_range=(0.80, 0.90), phi_range=(0.26, 0.36),
                      blur_sigma_range=(1.1, 1.7))


def validate_domain_specs(specs):
    """Check ids are 0..N-1 once each and no two domains share all ranges."""
    ids = sorted(s.domain_id for s in specs)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain_id in {ids}")
    if ids != list(range(len(specs))):
        raise ValueError(f"domain ids must form a contiguous range [0, N), got {ids}")
    for s in specs:
        s.validate()
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if a.ranges() == b.ranges():
                raise ValueError(
                    f"domains {a.domain_id} and {b.domain_id} have identical "
                    "parameter ranges"
                )
    return specs


def spec_overlaps(target, sources):
    """Source domains whose every parameter range intersects the target's.

    A target counts as disjoint from a source if at least one of the
    omega/phi/blur intervals does not intersect; returns the ids of
    sources where no interval separates the two.
    """
    def intersects(r1, r2):
        return r1[0] <= r2[1] and r2[0] <= r1[1]

    overlapping = []
    for s in sources:
        tr, sr = target.ranges(), s.ranges()
        if all(intersects(tr[k], sr[k]) for k in tr):
            overlapping.append(s.domain_id)
    return overlapping


# ---------------------------------------------------------------------------
# tone curve and the differentiable remix
# ---------------------------------------------------------------------------

def untone(x, gamma):
    """Invert the tone curve (back to linear space)."""
    if np.all(gamma == 1.0):
        return x
    return x ** gamma


def tone(x, gamma):
    """Apply the tone curve to linear-space values."""
    if np.all(gamma == 1.0):
        return x
    return x ** (1.0 / gamma)


def remix(t_layer, r_layer, gamma):
    """Rebuild the contaminated frame from its two visible layers.

    The attenuation, blur, and per-image draws are already baked into the
    layers, so the mixture only needs the tone curve: linearize, add, clip,
    tone-map. remix(T_gt, R_gt) reproduces the contaminated image exactly.
    """
    s = untone(t_layer, gamma) + untone(r_layer, gamma)
    return tone(np.clip(s, 0.0, 1.0), gamma)


def remix_vjp(t_layer, r_layer, gamma, dout):
    """Backward pass of remix; clip and pow derivatives clamped near 0."""
    s = untone(t_layer, gamma) + untone(r_layer, gamma)
    inside = (s > 0.0) & (s < 1.0)
    sc = np.maximum(np.clip(s, 0.0, 1.0), 1e-12)
    dm = dout * inside * (1.0 / gamma) * sc ** (1.0 / gamma - 1.0)
    tb = np.maximum(t_layer, 1e-12)
    rb = np.maximum(r_layer, 1e-12)
    dt = dm * gamma * tb ** (gamma - 1.0)
    dr = dm * gamma * rb ** (gamma - 1.0)
    return dt, dr


# ---------------------------------------------------------------------------
# sample containers
# ---------------------------------------------------------------------------

@dataclass
class TripletSample:
    """One contaminated frame with its ground-truth layers.

    omega/phi/sigma record the draws when the sample was synthesized in
    memory; after a manifest round trip only gamma (a per-domain constant)
    is recoverable.
    """

    contaminated: np.ndarray
    transmission: np.ndarray
    reflection: np.ndarray
    domain_id: int
    gamma: float = None
    omega: float = None
    phi: float = None
    sigma: float = None


@dataclass(frozen=True)
class ManifestRecord:
    contaminated_path: str
    transmission_path: str
    reflection_path: str
    domain_id: int


# ---------------------------------------------------------------------------
# procedural base-image pool
# ---------------------------------------------------------------------------

def _smooth_noise(rng, height, width, cells):
    """Low-resolution random grid upsampled bilinearly (soft blotches)."""
    grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1, 3))
    yi = np.linspace(0.0, cells, height)
    xi = np.linspace(0.0, cells, width)
    y0 = np.minimum(yi.astype(int), cells - 1)
    x0 = np.minimum(xi.astype(int), cells - 1)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def procedural_image(rng, height=64, width=64):
    """Deterministic scene: color gradient, soft shapes, smooth noise, and a
    light fine-grained texture.

    Exposure is normalized (fixed mean and contrast) so that scene-to-scene
    variation does not drown the formation-parameter differences that define
    the domains; the mixing amplitudes and blur remain observable cues.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing="ij")
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0 = rng.uniform(0.0, 1.0, size=3)
    c1 = rng.uniform(0.0, 1.0, size=3)
    img = c0 + ramp[:, :, None] * (c1 - c0)

    for _ in range(rng.integers(3, 8)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.05, 0.35, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.5, 1.0)
        if rng.uniform() < 0.5:
            d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
            mask = np.clip(1.5 - d, 0.0, 1.0)
        else:
            inside = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
            mask = inside.astype(np.float64)
        img = img * (1 - alpha * mask[:, :, None]) + color * alpha * mask[:, :, None]

    img = 0.75 * img + 0.25 * _smooth_noise(rng, height, width, cells=4)
    img = img - img.mean() + 0.5
    img = 0.5 + (img - 0.5) * (0.18 / max(img.std(), 1e-6))
    img = img + 0.06 * rng.uniform(-1.0, 1.0, size=(height, width, 1))
    return np.clip(img, 0.0, 1.0)


def _pool_image(pool, rng, height, width):
    if pool == "procedural":
        return procedural_image(rng, height, width)
    if pool.startswith("dir:"):
        root = pool[4:]
        names = sorted(f for f in os.listdir(root) if f.lower().endswith(".png"))
        if not names:
            raise FileNotFoundError(f"no PNG files in base image pool {root!r}")
        img = load_png(os.path.join(root, names[rng.integers(len(names))]))
        h, w = img.shape[:2]
        if h < height or w < width:
            raise ValueError(
                f"pool image smaller than requested {height}x{width}: {h}x{w}"
            )
        y = rng.integers(h - height + 1)
        x = rng.integers(w - width + 1)
        return img[y:y + height, x:x + width]
    raise ValueError(f"unknown base_image_pool {pool!r}")


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def synthesize(t_raw, r_raw, spec, seed):
    """Mix one triplet from raw scene pictures; deterministic in seed.

    seed may be an int or a numpy SeedSequence.
    """
    t_raw = np.asarray(check_image(t_raw, "t_raw"), dtype=np.float64)
    r_raw = np.asarray(check_image(r_raw, "r_raw"), dtype=np.float64)
    if t_raw.shape != r_raw.shape:
        raise ValueError(f"shape mismatch: {t_raw.shape} vs {r_raw.shape}")
    spec.validate()

    rng = np.random.default_rng(seed if isinstance(seed, np.random.SeedSequence)
                                else np.random.SeedSequence(seed))
    omega = rng.uniform(*spec.omega_range)
    phi = rng.uniform(*spec.phi_range)
    sigma = rng.uniform(*spec.blur_sigma_range)
    g = spec.gamma

    t_lin = untone(t_raw, g)
    r_blur = blur2d(untone(r_raw, g), sigma)
    t_part = omega * t_lin
    r_part = phi * r_blur
    contaminated = tone(np.clip(t_part + r_part, 0.0, 1.0), g)
    transmission = tone(t_part, g)
    reflection = tone(r_part, g)
    return TripletSample(contaminated, transmission, reflection, spec.domain_id,
                         gamma=g, omega=omega, phi=phi, sigma=sigma)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Record list plus the domain specs the files were synthesized from."""

    records: list
    seed: int
    specs: list
    root: str = "."

    @property
    def n_domains(self):
        return len(self.specs)

    def indices_for_domain(self, domain_id):
        return [i for i, r in enumerate(self.records) if r.domain_id == domain_id]

    def spec_for(self, domain_id):
        for s in self.specs:
            if s.domain_id == domain_id:
                return s
        raise KeyError(f"no spec for domain {domain_id}")

    def sample_id(self, index):
        name = os.path.basename(self.records[index].contaminated_path)
        return os.path.splitext(name)[0]

    def load_sample(self, index):
        rec = self.records[index]
        gamma = self.spec_for(rec.domain_id).gamma
        return TripletSample(
            contaminated=load_png(os.path.join(self.root, rec.contaminated_path)),
            transmission=load_png(os.path.join(self.root, rec.transmission_path)),
            reflection=load_png(os.path.join(self.root, rec.reflection_path)),
            domain_id=rec.domain_id,
            gamma=gamma,
        )

    def write(self, path):
        lines = [f"{MANIFEST_HEADER} seed={self.seed}"]
        for s in self.specs:
            lines.append(
                f"# domain {s.domain_id}"
                f" omega={s.omega_range[0]:.6g}:{s.omega_range[1]:.6g}"
                f" phi={s.phi_range[0]:.6g}:{s.phi_range[1]:.6g}"
                f" blur={s.blur_sigma_range[0]:.6g}:{s.blur_sigma_range[1]:.6g}"
                f" gamma={s.gamma:.6g}"
                f" pool={s.base_image_pool}"
            )
        for r in self.records:
            lines.append(f"{r.contaminated_path}\t{r.transmission_path}"
                         f"\t{r.reflection_path}\t{r.domain_id}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        root = os.path.dirname(os.path.abspath(path))
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or not lines[0].startswith(MANIFEST_HEADER):
            raise ValueError(f"not an adanec manifest (bad header): {path}")
        seed = int(lines[0].split("seed=")[1])
        specs, records = [], []
        for ln in lines[1:]:
            if not ln.strip():
                continue
            if ln.startswith("# domain "):
                specs.append(_parse_spec_line(ln))
                continue
            if ln.startswith("#"):
                continue
            parts = ln.split("\t")
            if len(parts) != 4:
                raise ValueError(f"malformed manifest record: {ln!r}")
            records.append(ManifestRecord(parts[0], parts[1], parts[2], int(parts[3])))
        man = cls(records=records, seed=seed, specs=specs, root=root)
        ids = sorted({r.domain_id for r in records})
        known = {s.domain_id for s in specs}
        if ids and (ids != list(range(len(ids))) or not set(ids) <= known):
            raise ValueError(f"manifest domain ids must be contiguous and known, got {ids}")
        for r in records:
            for p in (r.contaminated_path, r.transmission_path, r.reflection_path):
                full = os.path.join(root, p)
                if not os.path.exists(full):
                    raise FileNotFoundError(f"manifest references missing file: {full}")
        return man


def _parse_spec_line(line):
    fields = dict(tok.split("=", 1) for tok in line[len("# domain "):].split(" ")[1:])
    did = int(line[len("# domain "):].split(" ")[0])

    def rng_of(key):
        lo, hi = fields[key].split(":")
        return (float(lo), float(hi))

    return DomainSpec(
        domain_id=did,
        omega_range=rng_of("omega"),
        phi_range=rng_of("phi"),
        blur_sigma_range=rng_of("blur"),
        gamma=float(fields["gamma"]),
        base_image_pool=fields.get("pool", "procedural"),
    )


def generate_dataset(specs, count_per_domain, seed, out_dir,
                     height=64, width=64, manifest_name="manifest.txt"):
    """Write PNG triplets plus a manifest; bitwise reproducible in seed."""
    specs = validate_domain_specs(list(specs))
    if count_per_domain < 0:
        raise ValueError("count_per_domain must be >= 0")
    os.makedirs(out_dir, exist_ok=True)

    records = []
    for spec in specs:
        sub = f"d{spec.domain_id}"
        if count_per_domain > 0:
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        for idx in range(count_per_domain):
            pool_rng = np.random.default_rng(
                np.random.SeedSequence([seed, spec.domain_id, idx, 0]))
            t_raw = _pool_image(spec.base_image_pool, pool_rng, height, width)
            r_raw = _pool_image(spec.base_image_pool, pool_rng, height, width)
            sample = synthesize(t_raw, r_raw, spec,
                                np.random.SeedSequence([seed, spec.domain_id, idx, 1]))
            rel = {k: f"{sub}/s{idx:04d}_{k}.png" for k in ("i", "t", "r")}
            save_png(sample.contaminated, os.path.join(out_dir, rel["i"]))
            save_png(sample.transmission, os.path.join(out_dir, rel["t"]))
            save_png(sample.reflection, os.path.join(out_dir, rel["r"]))
            records.append(ManifestRecord(rel["i"], rel["t"], rel["r"], spec.domain_id))

    man = DatasetManifest(records=records, seed=seed, specs=specs, root=out_dir)
    man.write(os.path.join(out_dir, manifest_name))
    return man
