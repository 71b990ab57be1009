"""Synthetic single-channel EEG with stage-dependent motifs.

Each subject gets a pink-noise background plus a theta-band component whose
power depends on the staging phase, interictal discharges (narrow spikes early
in epileptogenesis, wider sharp waves late), sleep-spindle-like bursts, brief
high-frequency oscillations, extreme artifact samples and NaN telemetry gaps.
Every inserted motif is written to a ground-truth event log so downstream
detection and attribution claims can be checked against known truth.

Determinism: each subject draws from its own counter-based substream keyed by
(seed, subject id), so a subject's trace is bit-identical regardless of cohort
composition or generation order.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal_io import Phase, PhaseMark, Recording, save_recording

MOTIF_NAMES = ("spike", "sharp_wave", "spindle", "hfo", "artifact", "loss")


@dataclass(frozen=True)
class MotifProfile:
    """Per-phase emission rates and waveform widths."""

    theta_power_scale: float = 1.0
    spike_rate_hz: float = 0.0
    spike_width_ms: float = 30.0
    sharp_wave_rate_hz: float = 0.0
    sharp_wave_width_ms: float = 120.0
    spindle_rate_per_min: float = 0.0
    hfo_rate_per_min: float = 0.0

    def __post_init__(self) -> None:
        for name in ("spike_width_ms", "sharp_wave_width_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in (
            "theta_power_scale",
            "spike_rate_hz",
            "sharp_wave_rate_hz",
            "spindle_rate_per_min",
            "hfo_rate_per_min",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def scaled(self, factor: float) -> "MotifProfile":
        """Profile with all rates and the theta power multiplied by `factor`."""
        return replace(
            self,
            theta_power_scale=self.theta_power_scale * factor,
            spike_rate_hz=self.spike_rate_hz * factor,
            sharp_wave_rate_hz=self.sharp_wave_rate_hz * factor,
            spindle_rate_per_min=self.spindle_rate_per_min * factor,
            hfo_rate_per_min=self.hfo_rate_per_min * factor,
        )


@dataclass(frozen=True)
class BackgroundSpec:
    """Broadband background: pink or white, band-limited, 50 Hz notched."""

    kind: str = "pink"
    amplitude_uv: float = 50.0
    low_hz: float = 0.5
    high_hz: float = 160.0
    notch_hz: float = 50.0
    notch_half_width_hz: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("pink", "white"):
            raise ValueError(f"background kind must be pink or white, got {self.kind!r}")
        if self.amplitude_uv <= 0:
            raise ValueError("amplitude_uv must be positive")
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError("need 0 < low_hz < high_hz")


def default_profiles() -> dict[Phase, MotifProfile]:
    """Desk-scale stage profiles.

    Baseline: strong theta, no discharges, frequent spindles.  Early: narrow
    spikes dominate.  Late: wide sharp waves dominate, more HFOs.  Both EPG
    stages run with suppressed theta; without that sustained background cue
    the baseline class is defined mostly by the absence of discharges, which
    a pooled classifier can rank but never score with any confidence.
    """
    return {
        Phase.BASELINE: MotifProfile(
            theta_power_scale=2.6,
            spindle_rate_per_min=3.0,
            hfo_rate_per_min=0.5,
        ),
        Phase.EARLY_EPG: MotifProfile(
            theta_power_scale=0.6,
            spike_rate_hz=0.8,
            spike_width_ms=30.0,
            sharp_wave_rate_hz=0.05,
            spindle_rate_per_min=1.5,
            hfo_rate_per_min=2.0,
        ),
        Phase.LATE_EPG: MotifProfile(
            theta_power_scale=0.6,
            spike_rate_hz=0.1,
            sharp_wave_rate_hz=0.9,
            sharp_wave_width_ms=120.0,
            spindle_rate_per_min=1.5,
            hfo_rate_per_min=3.0,
        ),
    }


@dataclass
class GeneratorConfig:
    seed: int = 0
    sample_rate_hz: int = 512
    phase_duration_s: float = 900.0
    duration_jitter: float = 0.15
    profile_jitter: float = 0.15
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    class_profiles: dict[Phase, MotifProfile] = field(default_factory=default_profiles)
    artifact_rate_per_min: float = 2.0
    # tuned so that default corpora lose roughly 5% of windows to the
    # 20%-missing discard rule (telemetry dropouts cluster around 2-3 s)
    loss_burst_rate_per_min: float = 0.5
    loss_burst_median_s: float = 2.5
    loss_burst_sigma: float = 0.6
    circadian_depth: float = 0.0
    circadian_period_s: float = 86400.0

    def __post_init__(self) -> None:
        if self.phase_duration_s < 30:
            raise ValueError("phase_duration_s must be at least 30 s")
        if not 0 <= self.duration_jitter < 1 or not 0 <= self.profile_jitter < 1:
            raise ValueError("jitter fractions must lie in [0, 1)")
        if not 0 <= self.circadian_depth <= 1:
            raise ValueError("circadian_depth must lie in [0, 1]")


@dataclass
class MotifEvent:
    time_s: float
    motif: str
    width_ms: float
    amplitude: float


def subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    """Counter-based substream for one subject, stable across cohorts."""
    key = zlib.crc32(subject_id.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, key))))


def _shaped_noise(
    rng: np.random.Generator,
    n: int,
    fs: float,
    low_hz: float,
    high_hz: float,
    pink: bool,
    notch_hz: float | None = None,
    notch_half_width_hz: float = 1.0,
) -> np.ndarray:
    """Unit-RMS band-limited noise built by shaping a flat complex spectrum."""
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec = rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)
    gain = np.zeros(freqs.size)
    band = (freqs >= low_hz) & (freqs <= high_hz)
    if pink:
        gain[band] = 1.0 / np.sqrt(freqs[band])
    else:
        gain[band] = 1.0
    if notch_hz is not None:
        gain[np.abs(freqs - notch_hz) < notch_half_width_hz] = 0.0
    x = np.fft.irfft(spec * gain, n)
    rms = x.std()
    if rms == 0:
        raise ValueError("shaped noise came out flat; band too narrow for n")
    return x / rms


def _ricker(width_samples: int) -> np.ndarray:
    """Mexican-hat pulse whose central lobe spans roughly `width_samples`."""
    half = max(2, int(round(1.5 * width_samples)))
    t = np.arange(-half, half + 1, dtype=np.float64)
    # central lobe of the Ricker wavelet has width 2*sqrt(2)*a
    a = max(1.0, width_samples / (2.0 * np.sqrt(2.0)))
    z = (t / a) ** 2
    return (1.0 - z) * np.exp(-z / 2.0)


def _burst(rng: np.random.Generator, fs: float, f_hz: float, dur_s: float) -> np.ndarray:
    """Gaussian-windowed oscillation burst with random phase, unit peak."""
    n = max(8, int(round(dur_s * fs)))
    t = np.arange(n) / fs
    phase = rng.uniform(0, 2 * np.pi)
    window = np.exp(-0.5 * ((t - t[-1] / 2) / (dur_s / 4)) ** 2)
    return np.sin(2 * np.pi * f_hz * t + phase) * window


def _add_at(signal: np.ndarray, center_idx: int, pulse: np.ndarray) -> None:
    lo = center_idx - pulse.size // 2
    hi = lo + pulse.size
    p_lo = max(0, -lo)
    p_hi = pulse.size - max(0, hi - signal.size)
    if p_lo >= p_hi:
        return
    signal[max(0, lo) : max(0, lo) + (p_hi - p_lo)] += pulse[p_lo:p_hi]


def _event_times(
    rng: np.random.Generator,
    rate_hz: float,
    t0: float,
    duration: float,
    depth: float,
    period_s: float,
) -> np.ndarray:
    """Poisson event times in [t0, t0+duration), optionally rate-modulated."""
    if rate_hz <= 0 or duration <= 0:
        return np.empty(0)
    n = rng.poisson(rate_hz * duration)
    times = np.sort(rng.uniform(t0, t0 + duration, size=n))
    if depth > 0 and times.size:
        # thin against a sinusoidal rate profile
        accept = rng.uniform(0, 1, size=times.size) <= (
            1 + depth * np.sin(2 * np.pi * times / period_s)
        ) / (1 + depth)
        times = times[accept]
    return times


def generate_recording(
    subject_id: str,
    group: str,
    cfg: GeneratorConfig,
) -> tuple[Recording, list[MotifEvent]]:
    """Synthesize one subject and its ground-truth event log.

    Control subjects run the Baseline profile through all three phase spans;
    their phase marks still partition time the same way, so they can be pushed
    through the identical evaluation plumbing.
    """
    rng = subject_rng(cfg.seed, subject_id)
    fs = cfg.sample_rate_hz
    bg = cfg.background

    jd = cfg.duration_jitter
    durations = [
        cfg.phase_duration_s * (1 + rng.uniform(-jd, jd)) for _ in range(3)
    ]
    # round phase boundaries onto whole seconds to keep marks tidy
    durations = [round(d) for d in durations]
    starts = np.concatenate([[0.0], np.cumsum(durations)[:-1]])
    total_s = float(np.sum(durations))
    n = int(round(total_s * fs))

    subject_gain = 1 + rng.uniform(-cfg.profile_jitter, cfg.profile_jitter)

    signal = bg.amplitude_uv * _shaped_noise(
        rng,
        n,
        fs,
        bg.low_hz,
        bg.high_hz,
        pink=(bg.kind == "pink"),
        notch_hz=bg.notch_hz,
        notch_half_width_hz=bg.notch_half_width_hz,
    )

    events: list[MotifEvent] = []
    phases = (Phase.BASELINE, Phase.EARLY_EPG, Phase.LATE_EPG)
    for phase, t0, dur in zip(phases, starts, durations):
        source = Phase.BASELINE if group == "Control" else phase
        profile = cfg.class_profiles[source].scaled(subject_gain)

        lo = int(round(t0 * fs))
        hi = int(round((t0 + dur) * fs))
        theta = _shaped_noise(rng, hi - lo, fs, 4.0, 8.0, pink=False)
        signal[lo:hi] += 0.4 * bg.amplitude_uv * profile.theta_power_scale * theta

        def emit(rate_hz: float, motif: str, t0=t0, dur=dur, profile=profile):
            for t in _event_times(
                rng, rate_hz, t0, dur, cfg.circadian_depth, cfg.circadian_period_s
            ):
                idx = int(round(t * fs))
                if motif == "spike":
                    width_ms = profile.spike_width_ms * rng.uniform(0.8, 1.2)
                    amp = bg.amplitude_uv * 7.0 * rng.lognormal(0.0, 0.25)
                    pulse = amp * _ricker(int(round(width_ms * fs / 1000)))
                elif motif == "sharp_wave":
                    width_ms = profile.sharp_wave_width_ms * rng.uniform(0.8, 1.2)
                    amp = bg.amplitude_uv * 5.0 * rng.lognormal(0.0, 0.25)
                    pulse = amp * _ricker(int(round(width_ms * fs / 1000)))
                elif motif == "spindle":
                    width_ms = rng.uniform(500, 1000)
                    amp = bg.amplitude_uv * 1.3 * rng.lognormal(0.0, 0.2)
                    pulse = amp * _burst(
                        rng, fs, rng.uniform(12, 14), width_ms / 1000
                    )
                else:  # hfo
                    width_ms = rng.uniform(50, 100)
                    amp = bg.amplitude_uv * 0.9 * rng.lognormal(0.0, 0.2)
                    pulse = amp * _burst(
                        rng, fs, rng.uniform(120, 150), width_ms / 1000
                    )
                _add_at(signal, idx, pulse)
                events.append(MotifEvent(float(t), motif, float(width_ms), float(amp)))

        emit(profile.spike_rate_hz, "spike")
        emit(profile.sharp_wave_rate_hz, "sharp_wave")
        emit(profile.spindle_rate_per_min / 60.0, "spindle")
        emit(profile.hfo_rate_per_min / 60.0, "hfo")

    # extreme artifact samples, amplitude far beyond the moving-MAD fence
    for t in _event_times(
        rng, cfg.artifact_rate_per_min / 60.0, 0.0, total_s, 0.0, 1.0
    ):
        idx = int(round(t * fs))
        run = int(rng.integers(1, 16))
        amp = float(
            rng.choice([-1.0, 1.0]) * bg.amplitude_uv * rng.uniform(12.0, 30.0)
        )
        signal[idx : idx + run] = amp
        events.append(MotifEvent(float(t), "artifact", run / fs * 1000, amp))

    # telemetry loss bursts (NaN runs)
    for t in _event_times(
        rng, cfg.loss_burst_rate_per_min / 60.0, 0.0, total_s, 0.0, 1.0
    ):
        dur = rng.lognormal(np.log(cfg.loss_burst_median_s), cfg.loss_burst_sigma)
        idx = int(round(t * fs))
        signal[idx : idx + int(round(dur * fs))] = np.nan
        events.append(MotifEvent(float(t), "loss", float(dur * 1000), 0.0))

    events.sort(key=lambda e: e.time_s)
    marks = [PhaseMark(float(t0), phase) for phase, t0 in zip(phases, starts)]
    rec = Recording(
        subject_id=subject_id,
        group=group,
        sample_rate_hz=fs,
        samples=signal.astype(np.float32),
        phase_marks=marks,
    )
    return rec, events


def make_cohort(
    cfg: GeneratorConfig,
    n_pps: int,
    n_control: int,
    out_dir: str | Path | None = None,
) -> list[tuple[Recording, list[MotifEvent]]]:
    """Generate a full cohort, optionally persisting it to `out_dir`."""
    cohort = []
    names = [f"pps{i + 1:02d}" for i in range(n_pps)]
    names += [f"ctl{i + 1:02d}" for i in range(n_control)]
    for sid in names:
        group = "PPS" if sid.startswith("pps") else "Control"
        rec, events = generate_recording(sid, group, cfg)
        cohort.append((rec, events))
        if out_dir is not None:
            save_recording(out_dir, rec)
            write_event_log(Path(out_dir) / f"{sid}.events.csv", events)
    return cohort


def write_event_log(path: str | Path, events: list[MotifEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "motif", "width_ms", "amplitude"])
        for ev in events:
            writer.writerow(
                [f"{ev.time_s:.6f}", ev.motif, f"{ev.width_ms:.3f}", f"{ev.amplitude:.6f}"]
            )


def read_event_log(path: str | Path) -> list[MotifEvent]:
    events = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            events.append(
                MotifEvent(
                    time_s=float(row["time_s"]),
                    motif=row["motif"],
                    width_ms=float(row["width_ms"]),
                    amplitude=float(row["amplitude"]),
                )
            )
    return events
