"""Monte Carlo experiments over SNR and bit budget for receivers R1-R5.

R1  unconstrained DMA weights from the greedy design
R2  Lorentzian DMA elements fitted to R1
R3  frequency-flat amplitude-only DMA elements fitted to R1
R4  frequency-flat partially connected phase shifters, fixed ADC support
R5  linear MMSE on the raw antenna outputs, no quantization

Every trial draws one channel realization and one OFDM block; all
receivers and all (SNR, budget) points of a run see the same realization,
symbols and normalized noise, so comparisons are matched.
"""

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .channel import (CONSTELLATIONS, ChannelConfig, channel_output, draw_noise,
                      generate_channel, generate_ofdm_block, qpsk_hard_bits)
from .design import (baseline_lmmse_unquantized, baseline_phase_shifter, finalize_design,
                     greedy_configure, lmmse_filters, normalize_strip_power,
                     recover_symbols, select_strip_candidates, unquantized_mmse)
from .fitting import (ALPHA_MODES, flat_lorentzian, project_flat, project_lorentzian,
                      projection_targets)
from .frontend import (DmaWeights, LorentzianParams, build_frequency_grid, build_propagation,
                       default_delta, flat_weights, lorentzian_weights, equivalent_channel)
from .quantization import kappa, levels_from_budget, overload_fraction

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

RECEIVERS = {
    "R1": "unconstrained DMA",
    "R2": "Lorentzian DMA",
    "R3": "frequency-flat DMA",
    "R4": "phase-shifter baseline",
    "R5": "unquantized LMMSE",
}
CSV_FIELDS = ("receiver", "snr_db", "b_overall", "mse", "ber", "overload", "e_o", "seed")
SNR_DEFINITION = ("snr_db = 10 log10(1 / sigma_z^2); unit-energy symbols, per-element noise "
                  "power sigma_z^2, unit-diagonal element correlation")
MAX_RETRIES = 3


def snr_to_noise_power(snr_db):
    """Per-element noise power sigma_z^2 = 10^(-snr_db / 10)."""
    return 10.0 ** (-float(snr_db) / 10.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run; ``(seed, config)`` fixes all outputs."""

    channel: ChannelConfig = field(default_factory=ChannelConfig)
    snr_db: tuple = (4.0,)
    b_overall: tuple = (80,)
    trials: int = 1000
    seed: int = 0
    receivers: tuple = tuple(RECEIVERS)
    constellation: str = "qpsk"
    carrier: float = 1.9e9
    subcarrier_spacing: float = 20e6
    attenuation: float = 0.006
    phase_slope: float = 1.592
    flat_bounds: tuple = (0.001, 1.0)
    quality_factors: tuple = (0.1, 5.0, 30.0)
    delta: float = None
    eta: float = 2.0
    projection_iters: int = 10
    phase_shifter_support: float = 100.0
    interleaved: bool = False
    alpha_mode: str = "phase"
    strip_selection: bool = True
    normalize_unconstrained: bool = True

    def __post_init__(self):
        for name in ("snr_db", "b_overall", "receivers", "flat_bounds", "quality_factors"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        unknown = set(self.receivers) - set(RECEIVERS)
        if unknown:
            raise ValueError(f"unknown receivers {sorted(unknown)}; expected a subset of {list(RECEIVERS)}")
        if self.constellation not in CONSTELLATIONS:
            raise ValueError(f"unknown constellation {self.constellation!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        for bits in self.b_overall:
            if self.levels(bits) < 2:
                raise ValueError(f"b_overall={bits} gives fewer than 2 decision regions per ADC")
        if self.projection_iters < 1:
            raise ValueError("projection_iters must be >= 1")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")

    def levels(self, bits):
        return levels_from_budget(bits, self.channel.n_strips)

    @property
    def grid(self):
        return build_frequency_grid(self.carrier, self.channel.n_subcarriers * self.subcarrier_spacing,
                                    self.channel.n_subcarriers)

    @property
    def delta_value(self):
        return default_delta(self.subcarrier_spacing) if self.delta is None else self.delta

    @property
    def points(self):
        """All (snr_db, b_overall) pairs of the run."""
        return [(s, b) for b in self.b_overall for s in self.snr_db]

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["channel"] = asdict(self.channel)
        return d


# ---------------------------------------------------------------------------
# Configuration files

_SECTIONS = {
    "channel": {"n_users", "n_subcarriers", "n_taps", "n_strips", "n_elements", "spacing"},
    "frontend": {"carrier_hz": "carrier", "subcarrier_spacing_hz": "subcarrier_spacing",
                 "attenuation": "attenuation", "phase_slope": "phase_slope",
                 "flat_bounds": "flat_bounds", "quality_factors": "quality_factors",
                 "delta_rad_s": "delta"},
    "design": {"eta", "projection_iters", "phase_shifter_support", "interleaved", "alpha_mode",
               "strip_selection", "normalize_unconstrained"},
}
_TOP = {"seed", "trials", "receivers", "constellation", "snr_db", "b_overall"}


def _read_mapping(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        return json.loads(raw.decode())
    if path.suffix.lower() == ".toml":
        return tomllib.loads(raw.decode())
    raise ValueError(f"config {path} must be .json or .toml")


def _merge(base, update):
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def default_mapping():
    """The shipped defaults as a nested mapping."""
    text = resources.files("dmarx").joinpath("data/paper.toml").read_text()
    return tomllib.loads(text)


def config_from_mapping(mapping):
    """Build an :class:`ExperimentConfig` from the nested file layout."""
    unknown = set(mapping) - _TOP - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    kwargs = {k: mapping[k] for k in _TOP if k in mapping}
    channel = dict(mapping.get("channel", {}))
    bad = set(channel) - _SECTIONS["channel"]
    if bad:
        raise ValueError(f"unknown [channel] keys {sorted(bad)}")
    kwargs["channel"] = ChannelConfig(**channel)
    frontend = mapping.get("frontend", {})
    bad = set(frontend) - set(_SECTIONS["frontend"])
    if bad:
        raise ValueError(f"unknown [frontend] keys {sorted(bad)}")
    for key, value in frontend.items():
        kwargs[_SECTIONS["frontend"][key]] = value
    design = mapping.get("design", {})
    bad = set(design) - _SECTIONS["design"]
    if bad:
        raise ValueError(f"unknown [design] keys {sorted(bad)}")
    kwargs.update(design)
    return ExperimentConfig(**kwargs)


def load_config(path=None, **overrides):
    """Shipped defaults, updated by the file at ``path`` (JSON or TOML), then ``overrides``.

    ``overrides`` are top-level :class:`ExperimentConfig` fields; ``None``
    values are ignored so CLI flags can be passed straight through.
    """
    mapping = default_mapping()
    if path is not None:
        mapping = _merge(mapping, _read_mapping(path))
    cfg = config_from_mapping(mapping)
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


# ---------------------------------------------------------------------------
# Receivers


@dataclass
class ReceiverBank:
    """Designed receivers for one channel realization and one (SNR, budget) point."""

    designs: dict          # label -> ReceiverDesign for R1-R4
    lmmse: np.ndarray      # (M, K, N) R5 filters, or None
    e_o: float             # analytic unquantized MMSE per symbol (raw antenna outputs)


def _mixture(params_list, choice):
    strips = np.arange(len(choice))
    pick = lambda name: np.stack([getattr(p, name) for p in params_list])[choice, strips]
    return LorentzianParams(pick("strength"), pick("damping"), pick("resonance"))


def design_receivers(ch, cfg, levels, receivers=None):
    """Design the requested receivers for one channel realization."""
    receivers = tuple(cfg.receivers if receivers is None else receivers)
    grid = cfg.grid
    prop = build_propagation(cfg.channel, grid, cfg.attenuation, cfg.phase_slope)
    n_strips = cfg.channel.n_strips
    designs = {}
    need_dma = [r for r in ("R1", "R2", "R3") if r in receivers]
    if need_dma:
        g_hat, upsilon = equivalent_channel(ch, prop)
        kap = kappa(cfg.eta, levels)
        peak = cfg.flat_bounds[1]
        flat_values = lor = None
        if "R1" in need_dma or not cfg.interleaved:
            greedy = greedy_configure(g_hat, upsilon, kap, n_strips)
            q_hat = greedy.weights.vectors
        if "R1" in need_dma:
            vectors = normalize_strip_power(q_hat, upsilon) if cfg.normalize_unconstrained else q_hat
            designs["R1"] = finalize_design(DmaWeights("unconstrained", vectors), g_hat, upsilon, prop,
                                            levels, cfg.eta, label="R1")
        if "R2" in need_dma or "R3" in need_dma:
            if cfg.interleaved:
                flat_values, lor = _interleaved_projections(g_hat, upsilon, kap, cfg, need_dma)
            else:
                targets = projection_targets(q_hat, None, peak)
                flat_values = project_flat(targets, cfg.flat_bounds, cfg.projection_iters,
                                           cfg.alpha_mode).values
                if "R2" in need_dma:
                    lor = project_lorentzian(targets, grid, cfg.delta_value, cfg.quality_factors,
                                             cfg.projection_iters, alpha_mode=cfg.alpha_mode).params
        if "R3" in need_dma:
            weights = flat_weights(flat_values, grid.n_subcarriers, bounds=cfg.flat_bounds)
            designs["R3"] = finalize_design(weights, g_hat, upsilon, prop, levels, cfg.eta, label="R3")
        if "R2" in need_dma:
            meta = {}
            if cfg.strip_selection:
                emulated = flat_lorentzian(flat_values, grid, max(cfg.quality_factors))
                options = [lor, emulated]
                choice, _ = select_strip_candidates([p.response(grid.omega) for p in options],
                                                    g_hat, upsilon, levels, cfg.eta)
                lor = _mixture(options, choice)
                meta["flat_strips"] = int(np.sum(choice == 1))
            weights = lorentzian_weights(lor, grid, cfg.quality_factors)
            designs["R2"] = finalize_design(weights, g_hat, upsilon, prop, levels, cfg.eta,
                                            label="R2", metadata=meta)
    if "R4" in receivers:
        designs["R4"] = baseline_phase_shifter(ch, levels, cfg.phase_shifter_support, cfg.eta)
        designs["R4"].label = "R4"
    lmmse = lmmse_filters(ch) if "R5" in receivers else None
    cov = ch.freq @ np.conj(np.swapaxes(ch.freq, -1, -2)) + ch.noise_cov[None]
    e_o = unquantized_mmse(ch.freq, cov) / (ch.freq.shape[0] * ch.freq.shape[2])
    return ReceiverBank(designs, lmmse, e_o)


def _interleaved_projections(g_hat, upsilon, kap, cfg, need_dma):
    """Greedy runs where each microstrip is projected before the next one is designed."""
    grid = cfg.grid
    n_strips = cfg.channel.n_strips
    peak = cfg.flat_bounds[1]
    flat_values = np.zeros((n_strips, g_hat.shape[1] // n_strips))
    fitted = []

    def flat_hook(i, q):
        proj = project_flat(projection_targets(q[:, None, :], None, peak), cfg.flat_bounds,
                            cfg.projection_iters, cfg.alpha_mode)
        flat_values[i] = proj.values[0]
        return np.broadcast_to(proj.values[0], q.shape)

    def lorentz_hook(i, q):
        proj = project_lorentzian(projection_targets(q[:, None, :], None, peak), grid, cfg.delta_value,
                                  cfg.quality_factors, cfg.projection_iters, alpha_mode=cfg.alpha_mode)
        fitted.append(proj.params)
        return proj.weights.vectors[:, 0]

    greedy_configure(g_hat, upsilon, kap, n_strips, project=flat_hook)
    lor = None
    if "R2" in need_dma:
        greedy_configure(g_hat, upsilon, kap, n_strips, project=lorentz_hook)
        lor = LorentzianParams(np.concatenate([p.strength for p in fitted]),
                               np.concatenate([p.damping for p in fitted]),
                               np.concatenate([p.resonance for p in fitted]))
    return flat_values, lor


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class ResultRecord:
    receiver: str
    snr_db: float
    b_overall: int
    mse: float
    ber: float
    overload: float
    e_o: float
    seed: int
    wall_time: float = field(default=None, compare=False)

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("negative MSE")
        if not math.isnan(self.ber) and not 0.0 <= self.ber <= 0.5 + 1e-9:
            raise ValueError(f"bit error rate {self.ber} outside [0, 0.5]")


def _trial_draws(cfg, trial, attempt):
    ch = generate_channel(cfg.channel, np.random.default_rng(
        np.random.SeedSequence([cfg.seed, trial, attempt, 0])), seed=cfg.seed)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, trial, attempt, 1]))
    block = generate_ofdm_block(cfg.channel, cfg.constellation, data_rng)
    unit_noise = draw_noise(ch.with_noise_power(1.0), data_rng)
    return ch, block, unit_noise


def run_trial(cfg, trial):
    """Error tallies of one trial: array (points, receivers, 4) and e_o per point.

    The four tallies are squared error, bit errors, clipped ADC components
    and ADC components.
    """
    points = cfg.points
    out = np.zeros((len(points), len(cfg.receivers), 4))
    e_o = np.zeros(len(points))
    for attempt in range(MAX_RETRIES + 1):
        try:
            ch0, block, unit_noise = _trial_draws(cfg, trial, attempt)
            sent_bits = qpsk_hard_bits(block.symbols) if cfg.constellation == "qpsk" else None
            for p, (snr, bits) in enumerate(points):
                noise_power = snr_to_noise_power(snr)
                ch = ch0.with_noise_power(noise_power)
                bank = design_receivers(ch, cfg, cfg.levels(bits))
                e_o[p] = bank.e_o
                y = channel_output(ch, block, None, noise=math.sqrt(noise_power) * unit_noise)
                for r, label in enumerate(cfg.receivers):
                    if label == "R5":
                        s_hat, hard = baseline_lmmse_unquantized(ch, y, bank.lmmse)
                        clipped = total = 0
                    else:
                        design = bank.designs[label]
                        s_hat, hard, z = recover_symbols(design, y, return_inputs=True)
                        total = 2 * z.size
                        clipped = overload_fraction(z, design.spec.support) * total
                    out[p, r, 0] = np.sum(np.abs(s_hat - block.symbols) ** 2)
                    out[p, r, 1] = np.nan if sent_bits is None else np.count_nonzero(hard != sent_bits)
                    out[p, r, 2] = clipped
                    out[p, r, 3] = total
            return out, e_o
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            if attempt == MAX_RETRIES:
                raise RuntimeError(f"trial {trial}: design failed {MAX_RETRIES + 1} times; "
                                   f"last error: {exc!r}") from exc
            log.warning("trial %d attempt %d failed (%r); resampling", trial, attempt, exc)
    raise AssertionError("unreachable")


def _run_chunk(args):
    cfg, trials = args
    return [run_trial(cfg, t) for t in trials]


def run_experiment(cfg, workers=1, progress=None):
    """Monte Carlo over ``cfg.trials`` trials for every point and receiver.

    Trials can be spread over ``workers`` processes; tallies are summed in
    trial order, so the records do not depend on scheduling. ``progress``,
    if given, is called with the number of finished trials.
    """
    start = time.perf_counter()
    trials = list(range(cfg.trials))
    results = [None] * cfg.trials
    if workers > 1:
        chunks = [trials[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk, res in zip(chunks, pool.map(_run_chunk, [(cfg, c) for c in chunks])):
                for t, r in zip(chunk, res):
                    results[t] = r
        if progress:
            progress(cfg.trials)
    else:
        for t in trials:
            results[t] = run_trial(cfg, t)
            if progress:
                progress(t + 1)
    tallies = np.zeros_like(results[0][0])
    e_o = np.zeros_like(results[0][1])
    for out, eo in results:
        tallies += out
        e_o += eo
    elapsed = time.perf_counter() - start
    M, K = cfg.channel.n_subcarriers, cfg.channel.n_users
    symbols = cfg.trials * M * K
    records = []
    for p, (snr, bits) in enumerate(cfg.points):
        for r, label in enumerate(cfg.receivers):
            sq, errs, clipped, total = tallies[p, r]
            records.append(ResultRecord(
                receiver=label, snr_db=float(snr), b_overall=int(bits),
                mse=float(sq / symbols), ber=float(errs / (2 * symbols)),
                overload=float(clipped / total) if total else 0.0,
                e_o=float(e_o[p] / cfg.trials), seed=int(cfg.seed), wall_time=elapsed))
    return records


# ---------------------------------------------------------------------------
# Output


def emit_results(records, fmt, path):
    """Write records as CSV (fixed header, preceded by one comment line) or JSON."""
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                fh.write(f"# {SNR_DEFINITION}\n")
                writer = csv.writer(fh)
                writer.writerow(CSV_FIELDS)
                for rec in records:
                    writer.writerow([_fmt(getattr(rec, name)) for name in CSV_FIELDS])
        elif fmt == "json":
            payload = {"snr_definition": SNR_DEFINITION,
                       "records": [asdict(rec) for rec in records]}
            path.write_text(json.dumps(payload, indent=1))
        else:
            raise ValueError(f"unknown format {fmt!r}; expected 'csv' or 'json'")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


def read_results(path):
    """Parse a file written by :func:`emit_results` (format from the suffix or content)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        return [ResultRecord(**d) for d in json.loads(text)["records"]]
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
    casts = {"receiver": str, "b_overall": int, "seed": int}
    return [ResultRecord(**{k: casts.get(k, float)(v) for k, v in row.items()}) for row in reader]
