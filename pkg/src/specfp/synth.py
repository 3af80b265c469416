"""Synthetic packet-length traces with controlled periodic structure.

Each device profile is a sum of sinusoids on top of a base packet size, plus
Gaussian noise and Bernoulli bursts. Dominant frequencies are known by
construction, so the spectral ground truth is analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .traces import PacketTrace

# Observed packet-size bounds for typical captures: tiny ACK-sized frames at
# the bottom, common Ethernet MTU at the top.
MIN_BYTES = 43
MAX_BYTES = 1500


@dataclass(frozen=True)
class SynthProfile:
    base_bytes: int
    periodic_components: tuple[tuple[float, float], ...] = ()
    burst_prob: float = 0.0
    burst_bytes: int = 0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for freq, _amp in self.periodic_components:
            if not 0.0 < freq <= 0.5:
                raise ValidationError(
                    f"component frequency {freq} outside (0, 0.5] cycles/packet"
                )
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ValidationError(f"burst_prob {self.burst_prob} outside [0, 1]")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std {self.noise_std} is negative")
        if self.base_bytes < 1:
            raise ValidationError(f"base_bytes {self.base_bytes} < 1")


def generate_trace(
    profile: SynthProfile,
    length: int,
    device_id: int,
    device_name: str | None = None,
) -> PacketTrace:
    """Deterministic synthetic trace: sinusoids + noise + bursts, clamped.

    lengths[i] = clamp(round(base + sum_j amp_j*sin(2*pi*f_j*i) + noise_i
    + burst_i), 43, 1500). Noise then bursts are drawn, in that order, from
    one PCG64 generator seeded by the profile.
    """
    profile.validate()
    if length < 1:
        raise ValidationError(f"trace length {length} < 1")
    rng = np.random.Generator(np.random.PCG64(profile.seed))
    i = np.arange(length, dtype=np.float64)
    signal = np.full(length, float(profile.base_bytes))
    for freq, amp in profile.periodic_components:
        signal += amp * np.sin(2.0 * np.pi * freq * i)
    signal += rng.normal(0.0, profile.noise_std, length) if profile.noise_std > 0 else 0.0
    if profile.burst_prob > 0:
        bursts = rng.random(length) < profile.burst_prob
        signal += profile.burst_bytes * bursts
    lengths = np.clip(np.floor(signal + 0.5), MIN_BYTES, MAX_BYTES).astype(int)
    name = device_name if device_name is not None else f"synth-{device_id}"
    return PacketTrace(device_id=device_id, device_name=name, lengths=tuple(int(v) for v in lengths))


def profile_from_mapping(mapping: dict[str, str]) -> SynthProfile:
    """Build a profile from one key=value config section.

    Recognized keys: base_bytes, periodic (comma list of freq:amp pairs),
    burst_prob, burst_bytes, noise_std, seed.
    """
    known = {"base_bytes", "periodic", "burst_prob", "burst_bytes",
             "noise_std", "seed", "name", "length"}
    for key in mapping:
        if key not in known:
            raise ParseError(f"unknown synth profile key {key!r}")
    try:
        components = []
        for pair in mapping.get("periodic", "").split(","):
            pair = pair.strip()
            if not pair:
                continue
            freq_s, amp_s = pair.split(":")
            components.append((float(freq_s), float(amp_s)))
        return SynthProfile(
            base_bytes=int(mapping.get("base_bytes", 500)),
            periodic_components=tuple(components),
            burst_prob=float(mapping.get("burst_prob", 0.0)),
            burst_bytes=int(mapping.get("burst_bytes", 0)),
            noise_std=float(mapping.get("noise_std", 0.0)),
            seed=int(mapping.get("seed", 0)),
        )
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad synth profile value: {exc}") from None
