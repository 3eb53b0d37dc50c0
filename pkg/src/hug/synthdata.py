"""Synthetic composed-retrieval triplets with labelled noise.

An image is the mean of one unit code per attribute.  A modification text is
the mean over modified attributes of ``[attribute half | new-value half minus
old-value half]`` built from the text codebook, so the text names both the
value being replaced and its replacement.  Corruptions:

* image noise: Gaussian noise added to the reference (per-coordinate std
  ``sigma_img / sqrt(d_img)``, i.e. expected norm about ``sigma_img``);
* vague text: the value half is zeroed, leaving only which attributes change;
* coordination mismatch: the text is replaced by a delta whose "old" values
  the reference does not hold, while the target stays that of the original
  modification.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class WorldConfig:
    n_attributes: int = 4
    n_values: int = 4
    d_img: int = 32
    d_txt: int = 32


@dataclass(frozen=True)
class NoiseConfig:
    p_img: float = 0.3
    sigma_img: float = 0.5
    p_txt: float = 0.2
    p_mismatch: float = 0.2
    ambiguous_attribute: int = -1
    p_ambiguous: float = 0.0

    def validate(self) -> None:
        for name in ("p_img", "p_txt", "p_mismatch", "p_ambiguous"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.sigma_img < 0:
            raise ValueError("sigma_img must be non-negative")


CLEAN = NoiseConfig(0.0, 0.0, 0.0, 0.0)


@dataclass
class AttributeWorld:
    config: WorldConfig
    seed: int
    image_codes: np.ndarray  # (A, V, d_img)
    text_codes: np.ndarray  # (A, V, d_txt); first half names the attribute

    @property
    def n_attributes(self) -> int:
        return self.config.n_attributes

    @property
    def n_values(self) -> int:
        return self.config.n_values

    def render_image(self, values) -> np.ndarray:
        values = np.asarray(values)
        return self.image_codes[np.arange(self.n_attributes), values].mean(axis=0)

    def render_images(self, values: np.ndarray) -> np.ndarray:
        A = self.n_attributes
        return self.image_codes[np.arange(A)[None, :], values].mean(axis=1)

    def text_delta(self, attribute: int, old: int, new: int) -> np.ndarray:
        h = self.config.d_txt // 2
        attr_half = self.text_codes[attribute, new, :h]
        value_half = self.text_codes[attribute, new, h:] - self.text_codes[attribute, old, h:]
        return np.concatenate([attr_half, value_half])

    def render_text(self, mods, vague: bool = False) -> np.ndarray:
        x = np.mean([self.text_delta(a, u, v) for a, u, v in mods], axis=0)
        if vague:
            x[self.config.d_txt // 2:] = 0.0
        return x


def gen_world(config: WorldConfig, seed: int) -> AttributeWorld:
    A, V = config.n_attributes, config.n_values
    if A < 2 or V < 2:
        raise ValueError(f"need at least 2 attributes and 2 values, got A={A}, V={V}")
    if config.d_txt < 2 or config.d_txt % 2:
        raise ValueError(f"d_txt must be even and >= 2, got {config.d_txt}")
    if config.d_img < 1:
        raise ValueError("d_img must be positive")
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((A, V, config.d_img))
    img /= np.linalg.norm(img, axis=-1, keepdims=True)
    h = config.d_txt // 2
    attr = rng.standard_normal((A, 1, h))
    attr /= np.linalg.norm(attr, axis=-1, keepdims=True)
    val = rng.standard_normal((A, V, h))
    val /= np.linalg.norm(val, axis=-1, keepdims=True)
    txt = np.concatenate([np.broadcast_to(attr, (A, V, h)), val], axis=-1) / np.sqrt(2.0)
    return AttributeWorld(config, seed, img, txt)


@dataclass
class TripletExample:
    x_r: np.ndarray
    x_t: np.ndarray
    x_c: np.ndarray
    labels: dict


@dataclass
class TripletSet:
    """Column-oriented dataset plus the shared candidate gallery."""

    x_r: np.ndarray
    x_t: np.ndarray
    x_c: np.ndarray
    target_index: np.ndarray
    ref_values: np.ndarray
    target_values: np.ndarray
    modified: list[tuple[int, ...]]
    noise_img: np.ndarray
    noise_txt: np.ndarray
    coord_mismatch: np.ndarray
    ambiguous: np.ndarray
    gallery: np.ndarray
    gallery_values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x_r.shape[0]

    def subset(self, idx) -> "TripletSet":
        idx = np.asarray(idx)
        return TripletSet(
            self.x_r[idx], self.x_t[idx], self.x_c[idx], self.target_index[idx],
            self.ref_values[idx], self.target_values[idx], [self.modified[i] for i in idx],
            self.noise_img[idx], self.noise_txt[idx], self.coord_mismatch[idx],
            self.ambiguous[idx], self.gallery, self.gallery_values, dict(self.meta),
        )

    def label_record(self, i: int) -> dict:
        return {
            "index": i,
            "target_index": int(self.target_index[i]),
            "ref_values": [int(v) for v in self.ref_values[i]],
            "target_values": [int(v) for v in self.target_values[i]],
            "modified": [int(a) for a in self.modified[i]],
            "noise_img": float(self.noise_img[i]),
            "noise_txt": float(self.noise_txt[i]),
            "coord_mismatch": bool(self.coord_mismatch[i]),
            "ambiguous": bool(self.ambiguous[i]),
        }

    def examples(self) -> list[TripletExample]:
        return [TripletExample(self.x_r[i], self.x_t[i], self.x_c[i], self.label_record(i))
                for i in range(len(self))]


def combo_index(values: np.ndarray, V: int) -> np.ndarray:
    values = np.atleast_2d(values)
    A = values.shape[1]
    return values @ (V ** np.arange(A - 1, -1, -1))


def build_gallery(world: AttributeWorld, targets: np.ndarray, rng: np.random.Generator,
                  max_size: int = 4096) -> np.ndarray:
    """Attribute combinations in the gallery: all of them when there are at most
    ``max_size``, otherwise every target combination plus random distractors."""
    A, V = world.n_attributes, world.n_values
    if V ** A <= max_size:
        return np.array(list(itertools.product(range(V), repeat=A)), dtype=np.intp)
    combos = {tuple(t) for t in targets}
    while len(combos) < max_size:
        combos.add(tuple(int(v) for v in rng.integers(0, V, size=A)))
    return np.array(sorted(combos), dtype=np.intp)


def gen_triplets(world: AttributeWorld, n: int, noise: NoiseConfig, seed: int,
                 max_gallery: int = 4096) -> TripletSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    noise.validate()
    A, V = world.n_attributes, world.n_values
    d_img = world.config.d_img
    if noise.ambiguous_attribute >= A:
        raise ValueError(f"ambiguous_attribute {noise.ambiguous_attribute} out of range")
    rng = np.random.default_rng(seed)

    ref_values = np.empty((n, A), dtype=np.intp)
    target_values = np.empty((n, A), dtype=np.intp)
    x_r = np.empty((n, d_img))
    x_t = np.empty((n, world.config.d_txt))
    noise_img = np.zeros(n)
    noise_txt = np.zeros(n)
    mismatch = np.zeros(n, dtype=bool)
    ambiguous = np.zeros(n, dtype=bool)
    modified: list[tuple[int, ...]] = []

    for i in range(n):
        ref = rng.integers(0, V, size=A)
        n_mod = int(rng.integers(1, 3))
        attrs = np.sort(rng.choice(A, size=n_mod, replace=False))
        tgt = ref.copy()
        mods = []
        for a in attrs:
            new = int(rng.choice([v for v in range(V) if v != ref[a]]))
            tgt[a] = new
            mods.append((int(a), int(ref[a]), new))

        img = world.render_image(ref)
        if noise.ambiguous_attribute >= 0 and rng.random() < noise.p_ambiguous:
            a = noise.ambiguous_attribute
            # the code for this attribute is replaced by the mean over its values
            img = img + (world.image_codes[a].mean(axis=0) - world.image_codes[a, ref[a]]) / A
            ambiguous[i] = True
        if rng.random() < noise.p_img:
            img = img + noise.sigma_img / np.sqrt(d_img) * rng.standard_normal(d_img)
            noise_img[i] = noise.sigma_img
        vague = bool(rng.random() < noise.p_txt)
        noise_txt[i] = 1.0 if vague else 0.0
        if rng.random() < noise.p_mismatch:
            mismatch[i] = True
            k = int(rng.integers(1, 3))
            m_attrs = np.sort(rng.choice(A, size=k, replace=False))
            mods = []
            for a in m_attrs:
                old = int(rng.choice([v for v in range(V) if v != ref[a]]))
                new = int(rng.choice([v for v in range(V) if v != old]))
                mods.append((int(a), old, new))
        x_r[i] = img
        x_t[i] = world.render_text(mods, vague=vague)
        ref_values[i] = ref
        target_values[i] = tgt
        modified.append(tuple(int(a) for a in attrs))

    gallery_values = build_gallery(world, target_values, rng, max_gallery)
    lookup = {tuple(v): j for j, v in enumerate(gallery_values)}
    target_index = np.array([lookup[tuple(t)] for t in target_values], dtype=np.intp)
    return TripletSet(
        x_r=x_r,
        x_t=x_t,
        x_c=world.render_images(target_values),
        target_index=target_index,
        ref_values=ref_values,
        target_values=target_values,
        modified=modified,
        noise_img=noise_img,
        noise_txt=noise_txt,
        coord_mismatch=mismatch,
        ambiguous=ambiguous,
        gallery=world.render_images(gallery_values),
        gallery_values=gallery_values,
        meta={"seed": seed, "world_seed": world.seed},
    )
