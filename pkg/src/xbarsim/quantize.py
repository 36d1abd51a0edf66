"""Ideal uniform quantizer models for input DACs and ramping-counter ADCs."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

MIN_BITS, MAX_BITS = 2, 16


def _check_bits(bits):
    if bits is not None and not (MIN_BITS <= bits <= MAX_BITS):
        raise ValidationError(f"bits must be in [{MIN_BITS}, {MAX_BITS}] or None, got {bits}")


@dataclass
class DacSpec:
    """Input DAC: uniform levels over [0, v_max] volts; None disables it."""

    bits: int | None
    v_max: float
    v_min: float = 0.0
    clip_count: int = field(default=0, compare=False)

    def __post_init__(self):
        _check_bits(self.bits)
        if self.v_min != 0.0:
            raise ValidationError("DAC range must start at 0 V")
        if self.v_max <= self.v_min:
            raise ValidationError(f"need v_max > v_min, got [{self.v_min}, {self.v_max}]")


@dataclass
class AdcSpec:
    """Ramping ADC: uniform levels over [i_min, i_max] amperes; None disables it.

    One reference range per crossbar (the ramp is shared across columns).
    Out-of-range samples clamp; `clip_count` tallies them.
    """

    bits: int | None
    i_max: float
    i_min: float = 0.0
    clip_count: int = field(default=0, compare=False)

    def __post_init__(self):
        _check_bits(self.bits)
        if self.i_min < 0.0 or self.i_max <= self.i_min:
            raise ValidationError(f"need i_max > i_min >= 0, got [{self.i_min}, {self.i_max}]")


def _quantize(x, lo, hi, bits, spec):
    x = np.asarray(x, dtype=float)
    clipped = np.clip(x, lo, hi)
    spec.clip_count += int(np.count_nonzero((x < lo) | (x > hi)))
    lsb = (hi - lo) / (2 ** bits - 1)
    code = np.floor((clipped - lo) / lsb + 0.5)  # nearest level, half rounds up
    return lo + code * lsb


def dac_quantize(v, spec: DacSpec):
    """Quantize voltages onto the DAC grid; identity when disabled."""
    if spec is None or spec.bits is None:
        return np.asarray(v, dtype=float)
    return _quantize(v, spec.v_min, spec.v_max, spec.bits, spec)


def adc_quantize(i, spec: AdcSpec):
    """Quantize currents onto the ADC grid (reconstructed code * LSB)."""
    if spec is None or spec.bits is None:
        return np.asarray(i, dtype=float)
    return _quantize(i, spec.i_min, spec.i_max, spec.bits, spec)


def calibrate_adc_range(bits, sample_currents, headroom=1.05) -> AdcSpec:
    """ADC reference range from observed column currents: [0, headroom * max]."""
    sample_currents = np.asarray(sample_currents, dtype=float)
    if sample_currents.size == 0:
        raise ValidationError("cannot calibrate ADC range from empty samples")
    peak = float(sample_currents.max())
    if peak <= 0.0:
        raise ValidationError("cannot calibrate ADC range from all-zero samples")
    return AdcSpec(bits=bits, i_min=0.0, i_max=headroom * peak)
