//! Recombination maps, the hotspot label, the prior over labeled maps, and
//! the encoding of SNP matrices into network input tensors.
//!
//! A window `[0, L)` is split into three contiguous subwindows
//! `(left, hot, right)`. A map is a hotspot when the mean per-bp rate of the
//! hot subwindow exceeds `k` times both flanks and `k` times the genome-wide
//! median rate. All rates here are population-scaled (per bp).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coalescent::SnpMatrix;

#[derive(Debug, Error)]
pub enum HotspotError {
    #[error("invalid recombination map: {0}")]
    InvalidMap(String),
    #[error("window of width {window} bp exceeds map domain of {domain} bp")]
    WindowOutsideDomain { window: f64, domain: f64 },
    #[error("invalid prior configuration: {0}")]
    InvalidPrior(String),
    #[error("no map consistent with label after {0} attempts")]
    RejectionExhausted(usize),
    #[error("empty map collection")]
    EmptyCollection,
    #[error("matrix is {got_n}x{got_d}, expected {want_n}x{want_d}")]
    DimensionMismatch {
        got_n: usize,
        got_d: usize,
        want_n: usize,
        want_d: usize,
    },
}

/// Piecewise-constant per-bp recombination rate over `[0, length)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecombMap {
    /// `(start_bp, rate)` pieces; starts strictly increase from 0.
    pieces: Vec<(f64, f64)>,
    length: f64,
}

impl RecombMap {
    pub fn new(pieces: Vec<(f64, f64)>, length: f64) -> Result<Self, HotspotError> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(HotspotError::InvalidMap(format!("bad length {length}")));
        }
        if pieces.is_empty() {
            return Err(HotspotError::InvalidMap("no pieces".into()));
        }
        if pieces[0].0 != 0.0 {
            return Err(HotspotError::InvalidMap("first piece must start at 0".into()));
        }
        for w in pieces.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(HotspotError::InvalidMap("starts must strictly increase".into()));
            }
        }
        for &(start, rate) in &pieces {
            if start >= length {
                return Err(HotspotError::InvalidMap("piece starts beyond domain".into()));
            }
            if !(rate >= 0.0) || !rate.is_finite() {
                return Err(HotspotError::InvalidMap(format!("bad rate {rate}")));
            }
        }
        Ok(Self { pieces, length })
    }

    pub fn flat(rate: f64, length: f64) -> Result<Self, HotspotError> {
        Self::new(vec![(0.0, rate)], length)
    }

    /// Background / hot / background map over the given window geometry.
    pub fn three_piece(
        left_rate: f64,
        hot_rate: f64,
        right_rate: f64,
        window: &WindowSpec,
    ) -> Result<Self, HotspotError> {
        let (hot_lo, hot_hi) = window.hot_interval();
        Self::new(
            vec![(0.0, left_rate), (hot_lo, hot_rate), (hot_hi, right_rate)],
            window.total_bp(),
        )
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    pub fn rate_at(&self, x: f64) -> f64 {
        let idx = match self.pieces.binary_search_by(|p| p.0.total_cmp(&x)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        self.pieces[idx].1
    }

    /// `∫_a^b rate(x) dx` with `[a, b]` clipped to the domain.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let a = a.max(0.0);
        let b = b.min(self.length);
        if !(b > a) {
            return 0.0;
        }
        let mut acc = 0.0;
        for (i, &(start, rate)) in self.pieces.iter().enumerate() {
            let end = self
                .pieces
                .get(i + 1)
                .map(|p| p.0)
                .unwrap_or(self.length);
            let lo = start.max(a);
            let hi = end.min(b);
            if hi > lo {
                acc += rate * (hi - lo);
            }
        }
        acc
    }

    /// Length-weighted mean per-bp rate over `[a, b]`.
    pub fn mean_rate(&self, a: f64, b: f64) -> f64 {
        let span = b.min(self.length) - a.max(0.0);
        if span <= 0.0 {
            return 0.0;
        }
        self.integral(a, b) / span
    }

    pub fn total_mass(&self) -> f64 {
        self.integral(0.0, self.length)
    }

    /// Position `x` in `[a, b]` with `∫_a^x rate = target`. `target` must lie
    /// in `(0, ∫_a^b rate)`; the result always falls inside a positive-rate
    /// piece.
    pub fn invert_integral(&self, a: f64, b: f64, target: f64) -> f64 {
        debug_assert!(target >= 0.0);
        let a = a.max(0.0);
        let b = b.min(self.length);
        let mut acc = 0.0;
        for (i, &(start, rate)) in self.pieces.iter().enumerate() {
            let end = self
                .pieces
                .get(i + 1)
                .map(|p| p.0)
                .unwrap_or(self.length);
            let lo = start.max(a);
            let hi = end.min(b);
            if hi > lo && rate > 0.0 {
                let mass = rate * (hi - lo);
                if acc + mass >= target {
                    return (lo + (target - acc) / rate).min(hi);
                }
                acc += mass;
            }
        }
        b
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            pieces: self.pieces.iter().map(|&(s, r)| (s, r * factor)).collect(),
            length: self.length,
        }
    }
}

/// Subwindow geometry: three contiguous intervals covering `[0, total)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub left_bp: f64,
    pub hot_bp: f64,
    pub right_bp: f64,
}

impl WindowSpec {
    pub fn new(left_bp: f64, hot_bp: f64, right_bp: f64) -> Result<Self, HotspotError> {
        let ok = |w: f64| w > 0.0 && w.is_finite();
        if !(ok(left_bp) && ok(hot_bp) && ok(right_bp)) {
            return Err(HotspotError::InvalidPrior("window widths must be positive".into()));
        }
        Ok(Self { left_bp, hot_bp, right_bp })
    }

    /// Human-scale default: 13 kb flanks around a 2 kb center.
    pub fn default_human() -> Self {
        Self { left_bp: 13_000.0, hot_bp: 2_000.0, right_bp: 13_000.0 }
    }

    pub fn total_bp(&self) -> f64 {
        self.left_bp + self.hot_bp + self.right_bp
    }

    pub fn left_interval(&self) -> (f64, f64) {
        (0.0, self.left_bp)
    }

    pub fn hot_interval(&self) -> (f64, f64) {
        (self.left_bp, self.left_bp + self.hot_bp)
    }

    pub fn right_interval(&self) -> (f64, f64) {
        (self.left_bp + self.hot_bp, self.total_bp())
    }

    pub fn hot_center(&self) -> f64 {
        self.left_bp + self.hot_bp / 2.0
    }
}

/// True iff the hot subwindow rate exceeds `k` times both flanks and `k`
/// times the genome-wide median per-bp rate `r_tilde`. Both comparisons are
/// strict and jointly scale-invariant.
pub fn classify_window(
    map: &RecombMap,
    window: &WindowSpec,
    k: f64,
    r_tilde: f64,
) -> Result<bool, HotspotError> {
    if !(k > 1.0) {
        return Err(HotspotError::InvalidPrior(format!("intensity threshold {k} must exceed 1")));
    }
    if !(r_tilde > 0.0) {
        return Err(HotspotError::InvalidPrior(format!("median rate {r_tilde} must be positive")));
    }
    // Tolerate representation noise in the width sum.
    if window.total_bp() > map.length() * (1.0 + 1e-9) {
        return Err(HotspotError::WindowOutsideDomain {
            window: window.total_bp(),
            domain: map.length(),
        });
    }
    let (ll, lh) = window.left_interval();
    let (hl, hh) = window.hot_interval();
    let (rl, rh) = window.right_interval();
    let hot = map.mean_rate(hl, hh);
    let flank = map.mean_rate(ll, lh).max(map.mean_rate(rl, rh));
    Ok(hot > k * flank && hot > k * r_tilde)
}

/// Length-weighted median of per-bp rates across a map collection.
///
/// When the mass below and above split exactly in half the lower of the two
/// central values is returned.
pub fn genome_median_rate(maps: &[RecombMap]) -> Result<f64, HotspotError> {
    if maps.is_empty() {
        return Err(HotspotError::EmptyCollection);
    }
    let mut weighted: Vec<(f64, f64)> = Vec::new();
    let mut total = 0.0;
    for map in maps {
        for (i, &(start, rate)) in map.pieces.iter().enumerate() {
            let end = map.pieces.get(i + 1).map(|p| p.0).unwrap_or(map.length);
            let w = end - start;
            weighted.push((rate, w));
            total += w;
        }
    }
    weighted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = total / 2.0;
    let mut acc = 0.0;
    for &(rate, w) in &weighted {
        acc += w;
        if acc >= half {
            return Ok(rate);
        }
    }
    Ok(weighted.last().unwrap().0)
}

/// Inference task: classify hotspot presence or estimate its intensity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Discrete,
    Continuous,
}

/// Distribution of the flank (background) rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPrior {
    /// log10(rate) uniform on `[log10(lo), log10(hi)]`.
    LogUniform { lo: f64, hi: f64 },
    Fixed { rate: f64 },
}

impl BackgroundPrior {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            BackgroundPrior::LogUniform { lo, hi } => {
                let u = rng.gen_range(lo.log10()..hi.log10());
                10f64.powf(u)
            }
            BackgroundPrior::Fixed { rate } => rate,
        }
    }

    /// Median of the distribution, used as the default genome-wide rate.
    fn median(&self) -> f64 {
        match *self {
            BackgroundPrior::LogUniform { lo, hi } => (lo * hi).sqrt(),
            BackgroundPrior::Fixed { rate } => rate,
        }
    }
}

/// Prior over `(h, map, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub task: TaskKind,
    pub window: WindowSpec,
    pub background: BackgroundPrior,
    /// Intensity range for hotspot draws in discrete mode, `[lo, hi)`.
    pub hot_intensity: (f64, f64),
    /// Intensity range for null draws in discrete mode, within `[1, k_def)`.
    pub null_intensity: (f64, f64),
    /// Whether null draws elevate the center by a sub-threshold intensity.
    pub null_elevation: bool,
    /// Threshold `k_def` used by the label definition.
    pub definition_intensity: f64,
    /// Intensity range in continuous mode.
    pub heat_range: (f64, f64),
    /// Genome-wide median per-bp rate; derived from `background` when absent.
    pub median_rate: Option<f64>,
}

impl PriorConfig {
    pub fn default_discrete() -> Self {
        Self {
            task: TaskKind::Discrete,
            window: WindowSpec::default_human(),
            background: BackgroundPrior::LogUniform { lo: 1e-4, hi: 10f64.powf(-2.5) },
            hot_intensity: (10.0, 100.0),
            null_intensity: (1.0, 10.0),
            null_elevation: true,
            definition_intensity: 10.0,
            heat_range: (1.0, 100.0),
            median_rate: None,
        }
    }

    /// Continuous-task default: fixed 5e-4 flanks, heat uniform on [1, 100).
    pub fn default_continuous() -> Self {
        Self {
            task: TaskKind::Continuous,
            background: BackgroundPrior::Fixed { rate: 5e-4 },
            ..Self::default_discrete()
        }
        .with_task(TaskKind::Continuous)
    }

    fn with_task(mut self, task: TaskKind) -> Self {
        self.task = task;
        self
    }

    pub fn r_tilde(&self) -> f64 {
        self.median_rate.unwrap_or_else(|| self.background.median())
    }

    pub fn validate(&self) -> Result<(), HotspotError> {
        let err = |m: String| Err(HotspotError::InvalidPrior(m));
        if !(self.definition_intensity > 1.0) {
            return err(format!("definition_intensity {} must exceed 1", self.definition_intensity));
        }
        let (hlo, hhi) = self.hot_intensity;
        if !(hlo >= self.definition_intensity && hhi > hlo) {
            return err(format!("hot_intensity [{hlo}, {hhi}) must sit at or above the definition threshold"));
        }
        let (nlo, nhi) = self.null_intensity;
        if !(nlo >= 1.0 && nhi >= nlo && nhi <= self.definition_intensity) {
            return err(format!("null_intensity [{nlo}, {nhi}) must lie within [1, k_def]"));
        }
        let (clo, chi) = self.heat_range;
        if !(clo >= 1.0 && chi > clo) {
            return err(format!("heat_range [{clo}, {chi}) invalid"));
        }
        match self.background {
            BackgroundPrior::LogUniform { lo, hi } => {
                if !(lo > 0.0 && hi > lo) {
                    return err(format!("log-uniform background [{lo}, {hi}] invalid"));
                }
            }
            BackgroundPrior::Fixed { rate } => {
                if !(rate > 0.0) {
                    return err(format!("fixed background rate {rate} invalid"));
                }
            }
        }
        if !(self.r_tilde() > 0.0) {
            return err("median rate must be positive".into());
        }
        Ok(())
    }
}

/// Label attached to a simulated window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    /// Class index (0 = null, 1 = hotspot).
    Class(u32),
    /// Relative hotspot intensity.
    Heat(f64),
}

impl Label {
    pub fn class(&self) -> Option<u32> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Heat(_) => None,
        }
    }

    pub fn heat(&self) -> Option<f64> {
        match *self {
            Label::Heat(k) => Some(k),
            Label::Class(_) => None,
        }
    }
}

/// One draw from the prior: hotspot indicator, intensity, and the map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorDraw {
    pub h: bool,
    pub k: f64,
    pub map: RecombMap,
    pub window: WindowSpec,
    pub label: Label,
}

const REJECTION_CAP: usize = 1000;

/// Samples `(h, map, k)` from the configured prior.
///
/// Discrete mode draws `h ~ Bernoulli(0.5)` and rejection-samples the map
/// until the label definition agrees with `h`, so every returned draw
/// satisfies `classify_window(map, window, k_def, r_tilde) == h`.
pub fn sample_prior(cfg: &PriorConfig, rng: &mut ChaCha8Rng) -> Result<PriorDraw, HotspotError> {
    cfg.validate()?;
    let r_tilde = cfg.r_tilde();
    let k_def = cfg.definition_intensity;
    match cfg.task {
        TaskKind::Continuous => {
            let (lo, hi) = cfg.heat_range;
            let k = rng.gen_range(lo..hi);
            let bg = cfg.background.sample(rng);
            let map = RecombMap::three_piece(bg, bg * k, bg, &cfg.window)?;
            let h = classify_window(&map, &cfg.window, k_def, r_tilde)?;
            Ok(PriorDraw { h, k, map, window: cfg.window, label: Label::Heat(k) })
        }
        TaskKind::Discrete => {
            let h = rng.gen_bool(0.5);
            for _ in 0..REJECTION_CAP {
                let bg = cfg.background.sample(rng);
                let k = if h {
                    let (lo, hi) = cfg.hot_intensity;
                    rng.gen_range(lo..hi)
                } else if cfg.null_elevation {
                    let (lo, hi) = cfg.null_intensity;
                    if hi > lo {
                        rng.gen_range(lo..hi)
                    } else {
                        lo
                    }
                } else {
                    1.0
                };
                let map = RecombMap::three_piece(bg, bg * k, bg, &cfg.window)?;
                if classify_window(&map, &cfg.window, k_def, r_tilde)? == h {
                    return Ok(PriorDraw {
                        h,
                        k,
                        map,
                        window: cfg.window,
                        label: Label::Class(h as u32),
                    });
                }
            }
            Err(HotspotError::RejectionExhausted(REJECTION_CAP))
        }
    }
}

/// Number of input channels in a window tensor: SNP values and distances.
pub const CHANNELS: usize = 2;

/// Dense `n × d × 2` array in row-major `(row, snp, channel)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, data: vec![0.0; n * d * CHANNELS] }
    }

    pub fn from_data(n: usize, d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * d * CHANNELS);
        Self { n, d, data }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn snps(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, row: usize, snp: usize, channel: usize) -> f64 {
        self.data[(row * self.d + snp) * CHANNELS + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, snp: usize, channel: usize, value: f64) {
        self.data[(row * self.d + snp) * CHANNELS + channel] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New tensor with rows reordered as `perm` (row `i` of the result is row
    /// `perm[i]` of `self`).
    pub fn permuted_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n);
        let mut out = Self::zeros(self.n, self.d);
        let stride = self.d * CHANNELS;
        for (i, &src) in perm.iter().enumerate() {
            out.data[i * stride..(i + 1) * stride]
                .copy_from_slice(&self.data[src * stride..(src + 1) * stride]);
        }
        out
    }
}

/// One training or test datum: the encoded tensor, its label, and the prior
/// draw that produced it (absent for windows loaded from disk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub tensor: Tensor3,
    pub label: Label,
    /// Hotspot indicator of the generating draw.
    pub hot: bool,
    /// Relative intensity of the generating draw.
    pub heat: f64,
    pub draw: Option<PriorDraw>,
}

/// Encodes a SNP matrix into the `n × d × 2` input tensor.
///
/// Channel 0 carries the (binary or dosage) values; channel 1 is row-constant
/// and holds `(pos[j+1] - pos[j]) / window_bp`, with the rightmost entry 0.
pub fn encode_window(
    m: &SnpMatrix,
    window_bp: f64,
    n: usize,
    d: usize,
) -> Result<Tensor3, HotspotError> {
    if m.rows() != n || m.cols() != d {
        return Err(HotspotError::DimensionMismatch {
            got_n: m.rows(),
            got_d: m.cols(),
            want_n: n,
            want_d: d,
        });
    }
    let mut t = Tensor3::zeros(n, d);
    let positions = m.positions();
    for j in 0..d {
        let gap = if j + 1 < d {
            (positions[j + 1] - positions[j]) / window_bp
        } else {
            0.0
        };
        for i in 0..n {
            t.set(i, j, 0, m.value(i, j) as f64);
            t.set(i, j, 1, gap);
        }
    }
    Ok(t)
}
