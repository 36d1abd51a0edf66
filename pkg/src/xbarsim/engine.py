"""Weight-to-conductance mapping, conversion, calibration, and VMM execution.

Pipeline for one crossbar engine:

1. `map_weights` shifts and scales a real weight matrix onto the device
   conductance window (non-negative dense mapping with a shift constant c).
2. `convert` tunes the programmed conductances so the loaded array, with all
   wire and terminal parasitics, reproduces the target multiply. Targets are
   auto-scaled per column to what the array can physically reach; the scale
   is absorbed by the digital readout.
3. `get_cali_para` fits a per-column linear readout (gain, offset) from a
   few random sample inputs, absorbing residual distortion and quantizer
   bias.
4. `VmmEngine.execute` runs the full signal chain: DAC, crossbar solve,
   ADC, baseline correction, calibrated readout, shift removal.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circuit import CrossbarSolver
from .config import CrossbarConfig
from .errors import ValidationError
from .quantize import AdcSpec, DacSpec, adc_quantize, calibrate_adc_range, dac_quantize

# flat conversion/calibration signal amplitudes swept by
# optimize_conversion_signal, as fractions of v_sense_max
SIGNAL_AMPLITUDES = (1.0, 0.5, 0.2, 0.1, 0.05, 0.01, 0.001)
DEFAULT_SIGNAL_FRACTION = 0.1

DEFAULT_CALI_SAMPLES = 10
_DEGENERATE_SPREAD = 1e-18


@dataclass
class WeightMapping:
    """Linear map between weight/input space and conductance/voltage space.

    g_target = g_min + beta * (A + c), v = alpha * x. The shift c makes all
    mapped values non-negative; its contribution c * sum(x) is subtracted
    digitally after readout.
    """

    c: float
    alpha: float
    beta: float
    x_max: float

    def to_dict(self):
        return {"c": self.c, "alpha": self.alpha, "beta": self.beta, "x_max": self.x_max}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConversionResult:
    """Programmed conductances plus convergence diagnostics."""

    g_device: np.ndarray
    col_scale: np.ndarray     # per-column target scale s, in (0, 1]
    iterations: int
    converged: bool
    col_error: float          # worst per-column current error vs scaled target
    clipped_low: int          # devices pinned at g_min
    clipped_high: int         # devices pinned at g_max


def map_weights(weights, config: CrossbarConfig, x_max=1.0):
    """Map a real weight matrix onto [g_min, g_max] conductance targets.

    Returns (g_target, WeightMapping). g_target has the physical array shape;
    rows/columns beyond the weight shape are padded with g_min. The mapping
    uses the minimal shift c = max(0, -min(A)) and the full conductance
    window, so the realized multiply is y = x (A + c) - c * sum(x).
    """
    A = np.asarray(weights, dtype=float)
    if A.ndim != 2:
        raise ValidationError(f"weights must be 2-D, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise ValidationError("weights contain non-finite values")
    m, n = A.shape
    if m > config.rows or n > config.cols:
        raise ValidationError(
            f"weights {m}x{n} do not fit {config.rows}x{config.cols} array")
    if x_max <= 0.0:
        raise ValidationError(f"x_max must be > 0, got {x_max}")
    c = max(0.0, -float(A.min()))
    top = float(A.max()) + c
    beta = (config.g_max - config.g_min) / top if top > 0.0 else 1.0
    g_target = np.full((config.rows, config.cols), config.g_min)
    g_target[:m, :n] = config.g_min + beta * (A + c)
    return g_target, WeightMapping(c=c, alpha=config.v_sense_max / x_max,
                                   beta=beta, x_max=float(x_max))


def _scale_and_clip(desired_unit, config, target_scale):
    """Per-column scale s and clipped conductances from unit-scale desires."""
    if target_scale == "auto":
        s = np.minimum(config.g_max / desired_unit.max(axis=0), 1.0)
    else:
        s = np.full(desired_unit.shape[1], float(target_scale))
    g_new = np.clip(s[None, :] * desired_unit, config.g_min, config.g_max)
    return s, g_new


def convert(config: CrossbarConfig, g_target, v_conv, method="transfer",
            target_scale="auto", tol=1e-6, max_iter=100):
    """Iteratively tune programmed conductances against the solved circuit.

    Each iteration solves the loaded array, computes the per-device transfer
    realized so far, and reprograms every device so its realized contribution
    matches the (scaled) target, clipping to [g_min, g_max]:

    - method "transfer": matches the exact per-device input-to-output
      transfer coefficients, so the converged array reproduces the scaled
      target multiply for every input signal.
    - method "branch": matches branch currents under the specific conversion
      signal v_conv (the classic multiplicative update).

    target_scale "auto" rescales each column to the largest fraction of the
    ideal target its devices can reach without ceiling saturation; a numeric
    value (e.g. 1.0) fixes the scale, which large parasitic arrays cannot
    reach. Returns a ConversionResult; `converged` reports whether the worst
    per-column output current error dropped below tol.
    """
    g_target = np.asarray(g_target, dtype=float)
    if g_target.shape != (config.rows, config.cols):
        raise ValidationError(
            f"g_target shape {g_target.shape} != array {config.rows}x{config.cols}")
    v_conv = np.asarray(v_conv, dtype=float)
    if v_conv.shape != (config.rows,):
        raise ValidationError(f"v_conv must have shape ({config.rows},)")
    if method not in ("transfer", "branch"):
        raise ValidationError(f"unknown conversion method {method!r}")
    if method == "branch" and not (v_conv > 0.0).all():
        raise ValidationError("branch conversion needs a strictly positive signal")

    i_unit = v_conv @ g_target     # ideal column currents at unit scale
    norm = max(float(np.abs(i_unit).max()), 1e-300)
    gp = g_target.copy()
    s = np.ones(config.cols)
    col_error = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        solver = CrossbarSolver(config, gp)
        if method == "transfer":
            transfer = solver.transfer_matrix()
            eff = transfer / gp
            i_out = v_conv @ transfer
        else:
            sol = solver.solve(v_conv, check_range=False)
            v_drop = np.maximum(sol.v_top - sol.v_bot, 1e-300)
            eff = solver.g_dev * v_drop / (v_conv[:, None] * gp)
            i_out = sol.i_out
        col_error = float(np.abs(i_out - s * i_unit).max()) / norm
        desired_unit = g_target / eff
        s, g_new = _scale_and_clip(desired_unit, config, target_scale)
        delta = float(np.max(np.abs(g_new - gp) / gp))
        gp = g_new
        if delta < 1e-12:
            break
    converged = col_error <= tol
    return ConversionResult(
        g_device=gp, col_scale=s, iterations=iterations, converged=converged,
        col_error=col_error,
        clipped_low=max(0, int(np.count_nonzero(gp <= config.g_min)
                               - np.count_nonzero(g_target <= config.g_min))),
        clipped_high=max(0, int(np.count_nonzero(gp >= config.g_max)
                                - np.count_nonzero(g_target >= config.g_max))))


@dataclass
class CalibrationParams:
    """Per-column linear readout fitted from sample inputs."""

    gain: np.ndarray
    offset: np.ndarray
    sample_count: int
    degenerate: list = field(default_factory=list)   # columns with no fit spread

    def to_dict(self):
        return {"gain": self.gain.tolist(), "offset": self.offset.tolist(),
                "sample_count": self.sample_count,
                "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, d):
        return cls(gain=np.asarray(d["gain"], dtype=float),
                   offset=np.asarray(d["offset"], dtype=float),
                   sample_count=int(d["sample_count"]),
                   degenerate=list(d["degenerate"]))


def get_cali_para(engine, sample_inputs, sample_count=DEFAULT_CALI_SAMPLES, seed=0):
    """Fit per-column readout gain/offset from a few random sample inputs.

    Runs the samples through the full analog chain (DAC, solver, ADC,
    baseline correction) and regresses the known shifted products
    x (A + c) on the corrected currents, column by column. Columns whose
    corrected currents show no spread fall back to the nominal gain
    1 / (alpha * beta * s) and are listed in `degenerate`.
    """
    X = np.asarray(sample_inputs, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("calibration needs at least 2 sample inputs")
    if X.shape[0] > sample_count:
        rng = np.random.default_rng(seed)
        X = X[rng.choice(X.shape[0], size=sample_count, replace=False)]
    i_corr = engine.corrected_currents(X)
    y_shift = X @ (engine.weights + engine.mapping.c)
    n = engine.weights.shape[1]
    gain = np.zeros(n)
    offset = np.zeros(n)
    degenerate = []
    nominal = 1.0 / (engine.mapping.alpha * engine.mapping.beta
                     * engine.col_scale[:n])
    for j in range(n):
        if np.ptp(i_corr[:, j]) < _DEGENERATE_SPREAD:
            gain[j] = nominal[j]
            offset[j] = float(np.mean(y_shift[:, j] - gain[j] * i_corr[:, j]))
            degenerate.append(j)
        else:
            gain[j], offset[j] = np.polyfit(i_corr[:, j], y_shift[:, j], 1)
    return CalibrationParams(gain=gain, offset=offset,
                             sample_count=X.shape[0], degenerate=degenerate)


class VmmEngine:
    """One built crossbar engine: conductances plus the digital wrapper.

    `execute` maps a non-negative input vector x in [0, x_max] to an
    approximation of x @ weights through the analog signal chain.
    """

    def __init__(self, weights, config, mapping, g_target, g_device, col_scale,
                 conversion_info, dac=None, adc=None, cali=None, name="engine"):
        self.weights = np.asarray(weights, dtype=float)
        self.config = config
        self.mapping = mapping
        self.g_target = np.asarray(g_target, dtype=float)
        self.g_device = np.asarray(g_device, dtype=float)
        self.col_scale = np.asarray(col_scale, dtype=float)
        self.conversion_info = dict(conversion_info)
        self.dac = dac
        self.adc = adc
        self.cali = cali
        self.name = name
        self._solver = None

    @property
    def solver(self):
        if self._solver is None:
            self._solver = CrossbarSolver(self.config, self.g_device)
        return self._solver

    @property
    def shape(self):
        return self.weights.shape

    def _validate_inputs(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.ndim != 2 or X.shape[1] != self.weights.shape[0]:
            raise ValidationError(
                f"inputs must have {self.weights.shape[0]} entries, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValidationError("inputs contain non-finite values")
        lim = self.mapping.x_max * (1.0 + 1e-9)
        if X.min() < -1e-12 or X.max() > lim:
            raise ValidationError(
                f"inputs must lie in [0, {self.mapping.x_max}]")
        return X

    def raw_currents(self, X):
        """Post-ADC column currents for a batch of validated inputs."""
        X = self._validate_inputs(X)
        m, n = self.weights.shape
        V = np.zeros((X.shape[0], self.config.rows))
        V[:, :m] = self.mapping.alpha * X
        V = dac_quantize(V, self.dac)
        I = self.solver.currents(V, check_range=False)[:, :n]
        return adc_quantize(I, self.adc)

    def corrected_currents(self, X):
        """Post-ADC currents with the conductance baseline removed.

        The dense mapping rides every device on g_min (scaled by the column
        target scale); its known contribution alpha * g_min * s * sum(x) is
        subtracted before readout.
        """
        X = self._validate_inputs(X)
        n = self.weights.shape[1]
        baseline = self.mapping.alpha * self.config.g_min * X.sum(axis=1)
        return self.raw_currents(X) - np.outer(baseline, self.col_scale[:n])

    def execute_batch(self, X):
        """Run a batch of input vectors; returns (batch, cols) outputs."""
        X = self._validate_inputs(X)
        n = self.weights.shape[1]
        i_corr = self.corrected_currents(X)
        if self.cali is not None:
            y_shift = self.cali.gain * i_corr + self.cali.offset
        else:
            nominal = 1.0 / (self.mapping.alpha * self.mapping.beta
                             * self.col_scale[:n])
            y_shift = i_corr * nominal
        return y_shift - self.mapping.c * X.sum(axis=1)[:, None]

    def execute(self, x):
        """Run one input vector; returns a 1-D output vector."""
        return self.execute_batch(x)[0]

    def to_descriptor(self, blob_file):
        arrays = {}
        offset = 0
        for key, arr in (("weights", self.weights), ("g_target", self.g_target),
                         ("g_device", self.g_device)):
            arrays[key] = {"offset": offset, "shape": list(arr.shape)}
            offset += arr.size * 8
        return {
            "format": "xbar-engine",
            "version": 1,
            "name": self.name,
            "config": self.config.to_dict(),
            "mapping": self.mapping.to_dict(),
            "shape": list(self.weights.shape),
            "col_scale": self.col_scale.tolist(),
            "conversion": self.conversion_info,
            "dac": None if self.dac is None else
                {"bits": self.dac.bits, "v_max": self.dac.v_max, "v_min": self.dac.v_min},
            "adc": None if self.adc is None else
                {"bits": self.adc.bits, "i_max": self.adc.i_max, "i_min": self.adc.i_min},
            "calibration": None if self.cali is None else self.cali.to_dict(),
            "blob_file": blob_file,
            "arrays": arrays,
        }

    def save(self, json_path):
        """Write the JSON descriptor plus a little-endian f64 conductance blob.

        The blob sits next to the descriptor with a .bin suffix; its SHA-256
        is recorded in the descriptor for integrity checking on load.
        """
        json_path = Path(json_path)
        blob_path = json_path.with_suffix(".bin")
        blob = b"".join(arr.astype("<f8").tobytes()
                        for arr in (self.weights, self.g_target, self.g_device))
        desc = self.to_descriptor(blob_path.name)
        desc["blob_sha256"] = hashlib.sha256(blob).hexdigest()
        blob_path.write_bytes(blob)
        json_path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
        return json_path, blob_path

    @classmethod
    def load(cls, json_path):
        """Rebuild an engine byte-identically from descriptor plus blob."""
        json_path = Path(json_path)
        try:
            desc = json.loads(json_path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad engine descriptor: {exc}") from exc
        if desc.get("format") != "xbar-engine":
            raise ValidationError(f"{json_path} is not an engine descriptor")
        blob_path = json_path.parent / desc["blob_file"]
        if not blob_path.exists():
            raise ValidationError(f"missing conductance blob {blob_path}")
        blob = blob_path.read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if digest != desc["blob_sha256"]:
            raise ValidationError(
                f"conductance blob checksum mismatch for {blob_path}")

        def read_array(key):
            meta = desc["arrays"][key]
            shape = tuple(meta["shape"])
            count = int(np.prod(shape))
            return np.frombuffer(blob, dtype="<f8", count=count,
                                 offset=meta["offset"]).reshape(shape).copy()

        cali = desc["calibration"]
        return cls(
            weights=read_array("weights"),
            config=CrossbarConfig.from_dict(desc["config"]),
            mapping=WeightMapping.from_dict(desc["mapping"]),
            g_target=read_array("g_target"),
            g_device=read_array("g_device"),
            col_scale=np.asarray(desc["col_scale"], dtype=float),
            conversion_info=desc["conversion"],
            dac=None if desc["dac"] is None else DacSpec(**desc["dac"]),
            adc=None if desc["adc"] is None else AdcSpec(**desc["adc"]),
            cali=None if cali is None else CalibrationParams.from_dict(cali),
            name=desc.get("name", "engine"),
        )


def default_sample_inputs(rows, x_max=1.0, count=32, seed=0):
    """Uniform random non-negative sample inputs for range/readout fitting."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, x_max, size=(count, rows))


def build_engine(weights, config=None, x_max=1.0, dac_bits=None, adc_bits=None,
                 sample_inputs=None, calibrate=True,
                 cali_sample_count=DEFAULT_CALI_SAMPLES, seed=0,
                 method="transfer", target_scale="auto",
                 signal_fraction=DEFAULT_SIGNAL_FRACTION,
                 tol=1e-6, max_iter=100, name="engine"):
    """Build a ready-to-run VmmEngine from a weight matrix.

    The full recipe: map weights, convert with a flat signal at
    signal_fraction * v_sense_max, fit the ADC reference range to observed
    sample currents, then fit the per-column calibrated readout. When no
    sample inputs are given, uniform random ones are generated from `seed`.
    """
    A = np.asarray(weights, dtype=float)
    if config is None:
        if A.ndim != 2:
            raise ValidationError(f"weights must be 2-D, got shape {A.shape}")
        config = CrossbarConfig(rows=A.shape[0], cols=A.shape[1])
    g_target, mapping = map_weights(A, config, x_max)
    v_conv = np.full(config.rows, signal_fraction * config.v_sense_max)
    result = convert(config, g_target, v_conv, method=method,
                     target_scale=target_scale, tol=tol, max_iter=max_iter)
    info = {"method": method, "target_scale": target_scale,
            "signal_fraction": signal_fraction,
            "iterations": result.iterations, "converged": result.converged,
            "col_error": result.col_error if np.isfinite(result.col_error) else None,
            "clipped_low": result.clipped_low,
            "clipped_high": result.clipped_high}
    engine = VmmEngine(A, config, mapping, g_target, result.g_device,
                       result.col_scale, info, name=name)
    if dac_bits is not None:
        engine.dac = DacSpec(bits=dac_bits, v_max=config.v_sense_max)
    needs_samples = calibrate or adc_bits is not None
    if needs_samples and sample_inputs is None:
        sample_inputs = default_sample_inputs(A.shape[0], x_max, seed=seed)
    if adc_bits is not None:
        engine.adc = calibrate_adc_range(adc_bits, engine.raw_currents(sample_inputs))
    if calibrate:
        engine.cali = get_cali_para(engine, sample_inputs,
                                    sample_count=cali_sample_count, seed=seed)
    return engine


def evaluate_engine(engine, inputs):
    """Relative-error statistics of an engine against the exact product."""
    from .metrics import RelErrorStats
    X = np.asarray(inputs, dtype=float)
    actual = engine.execute_batch(X)
    ideal = X @ engine.weights
    return RelErrorStats.from_outputs(actual, ideal)


def optimize_conversion_signal(weights, config=None, x_max=1.0,
                               amplitudes=SIGNAL_AMPLITUDES, sample_inputs=None,
                               seed=0, **build_kwargs):
    """Sweep flat conversion-signal amplitudes and pick the most accurate.

    Builds one engine per amplitude (fractions of v_sense_max), evaluates the
    mean relative error over the sample inputs, and returns
    (best_fraction, report) where report lists per-amplitude statistics.
    Ties within numerical noise resolve to the largest amplitude, which has
    the best analog signal-to-noise ratio in hardware.
    """
    A = np.asarray(weights, dtype=float)
    if sample_inputs is None:
        sample_inputs = default_sample_inputs(A.shape[0], x_max, seed=seed)
    report = []
    for frac in amplitudes:
        engine = build_engine(A, config=config, x_max=x_max,
                              sample_inputs=sample_inputs, seed=seed,
                              signal_fraction=frac, **build_kwargs)
        stats = evaluate_engine(engine, sample_inputs)
        report.append({"fraction": float(frac), "mean": stats.mean,
                       "worst": stats.worst})
    best = min(entry["mean"] for entry in report)
    tie = best * (1.0 + 1e-9) + 1e-15
    chosen = max(entry["fraction"] for entry in report if entry["mean"] <= tie)
    return chosen, report
