//! Prefill and decode latency harness.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::tensor::{Prng, Scalar};
use crate::trainer::{assemble, ModelSpec};
use crate::{Error, Result};

/// System allocator wrapper that tracks live and peak bytes. Install it
/// with `#[global_allocator]` in a binary to get measured peaks.
pub struct CountingAlloc {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl CountingAlloc {
    pub const fn new() -> Self {
        Self {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::Relaxed)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current live size.
    pub fn reset_peak(&self) {
        self.peak.store(self.live(), Ordering::Relaxed);
    }
}

impl Default for CountingAlloc {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = self.live.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            self.peak.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        self.live.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = self.live.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                self.peak.fetch_max(now, Ordering::Relaxed);
            } else {
                self.live.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Resona,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Resona => "+resona",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub generate: usize,
    pub model: ModelSpec,
    /// Layers that carry retrieval in the `Resona` variant.
    pub resona_layers: Vec<usize>,
    /// Rows whose estimated peak exceeds this are skipped.
    pub budget_bytes: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut model = ModelSpec::desk(256, 64);
        model.resona.chunk_size = 64;
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            variants: vec![Variant::Baseline, Variant::Resona],
            reps: 3,
            generate: 128,
            model,
            resona_layers: vec![0],
            budget_bytes: Some(2 << 30),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config(format!("bench needs at least 3 repetitions, got {}", self.reps)));
        }
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config("bench lengths must be positive and strictly increasing".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no bench variants".into()));
        }
        self.spec(Variant::Resona).validate()
    }

    fn spec(&self, v: Variant) -> ModelSpec {
        let layers = match v {
            Variant::Baseline => Vec::new(),
            Variant::Resona => self.resona_layers.clone(),
        };
        self.model.clone().with_resona(&layers)
    }

    /// Rough upper bound on prefill working memory, used for budgeting.
    pub fn estimate_bytes<S: Scalar>(&self, len: usize) -> usize {
        let m = &self.model;
        let per_row = m.vocab + m.d_model * (8 + 4 * m.mlp_expansion) * m.n_layers;
        len * per_row * std::mem::size_of::<S>() * 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub variant: Variant,
    pub prefill_ms: Option<f64>,
    pub generate_ms: Option<f64>,
    pub peak_bytes: Option<usize>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub reps: usize,
    /// Whether peak bytes were measured by an allocator rather than
    /// estimated from session sizes.
    pub measured_memory: bool,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Runs the grid. Timing repetitions share one model per variant.
pub fn run_bench<S: Scalar>(cfg: &BenchConfig, alloc: Option<&CountingAlloc>) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        for &variant in &cfg.variants {
            let est = cfg.estimate_bytes::<S>(len);
            if let Some(budget) = cfg.budget_bytes.filter(|&b| est > b) {
                log::warn!("skipping length {len} ({}): estimate {est} exceeds budget {budget}", variant.label());
                rows.push(BenchRow {
                    len,
                    variant,
                    prefill_ms: None,
                    generate_ms: None,
                    peak_bytes: None,
                    skipped: Some(format!("estimated {est} bytes exceeds budget {budget}")),
                });
                continue;
            }
            rows.push(bench_cell::<S>(cfg, len, variant, alloc)?);
        }
    }
    Ok(BenchReport {
        rows,
        reps: cfg.reps,
        measured_memory: alloc.is_some(),
    })
}

/// Each prefill sample covers at least this many prompt tokens.
const PREFILL_MIN_TOKENS: usize = 2048;

fn bench_cell<S: Scalar>(cfg: &BenchConfig, len: usize, variant: Variant, alloc: Option<&CountingAlloc>) -> Result<BenchRow> {
    let model = assemble::<S>(&cfg.spec(variant), cfg.seed)?;
    let mut rng = Prng::new(cfg.seed).derive("bench").derive_index(len as u64);
    let prompt: Vec<usize> = (0..len).map(|_| rng.below(cfg.model.vocab)).collect();
    let mut prefill = Vec::with_capacity(cfg.reps);
    let mut generate = Vec::with_capacity(cfg.reps);
    let mut peak = 0usize;
    // discarded warm-up, then short prompts are timed over several calls
    model.prefill(&prompt)?;
    let inner = (PREFILL_MIN_TOKENS / len.max(1)).max(1);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        for _ in 1..inner {
            model.prefill(&prompt)?;
        }
        let base = alloc.map(|a| {
            a.reset_peak();
            a.live()
        });
        let (mut logits, mut session) = model.prefill(&prompt)?;
        prefill.push(t0.elapsed().as_secs_f64() * 1e3 / inner as f64);
        let t1 = Instant::now();
        for _ in 0..cfg.generate {
            let next = crate::trainer::argmax(&logits);
            logits = model.step(&mut session, next)?;
        }
        generate.push(t1.elapsed().as_secs_f64() * 1e3);
        let bytes = match (alloc, base) {
            (Some(a), Some(b)) => a.peak().saturating_sub(b),
            _ => session.bytes() + len * cfg.model.vocab * std::mem::size_of::<S>(),
        };
        peak = peak.max(bytes);
    }
    Ok(BenchRow {
        len,
        variant,
        prefill_ms: Some(median(&mut prefill)),
        generate_ms: Some(median(&mut generate)),
        peak_bytes: Some(peak),
        skipped: None,
    })
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

impl BenchReport {
    pub fn row(&self, len: usize, v: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.len == len && r.variant == v)
    }

    pub fn lengths(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.len).collect();
        l.dedup();
        l
    }

    /// r² of prefill time against length for one variant, over rows
    /// that ran.
    pub fn prefill_r2(&self, v: Variant) -> Option<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|r| r.variant == v)
            .filter_map(|r| r.prefill_ms.map(|ms| (r.len as f64, ms)))
            .unzip();
        (xs.len() >= 3).then(|| linear_fit(&xs, &ys).2)
    }

    /// Per-length `(len, resona / baseline)` for a metric.
    pub fn ratios(&self, metric: impl Fn(&BenchRow) -> Option<f64>) -> Vec<(usize, f64)> {
        self.lengths()
            .into_iter()
            .filter_map(|len| {
                let b = self.row(len, Variant::Baseline).and_then(&metric)?;
                let r = self.row(len, Variant::Resona).and_then(&metric)?;
                Some((len, r / b))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,variant,prefill_ms,generate_128_ms,peak_memory_bytes,status\n");
        for r in &self.rows {
            let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.len,
                r.variant.label(),
                f(r.prefill_ms),
                f(r.generate_ms),
                r.peak_bytes.map_or(String::new(), |b| b.to_string()),
                r.skipped.as_deref().map_or("ok".to_string(), |m| format!("skipped: {m}")),
            );
        }
        s
    }

    /// Length-by-variant grids for prefill, generation and memory.
    /// Times are rounded to the nearest millisecond.
    pub fn to_markdown(&self) -> String {
        let variants: Vec<Variant> = {
            let mut v: Vec<Variant> = Vec::new();
            for r in &self.rows {
                if !v.contains(&r.variant) {
                    v.push(r.variant);
                }
            }
            v
        };
        let lengths = self.lengths();
        let mut s = String::new();
        let tables: [(&str, Box<dyn Fn(&BenchRow) -> Option<String>>); 3] = [
            ("Prefill time (ms)", Box::new(|r: &BenchRow| r.prefill_ms.map(|v| format!("{v:.0}")))),
            ("Time to generate 128 tokens (ms)", Box::new(|r: &BenchRow| r.generate_ms.map(|v| format!("{v:.0}")))),
            ("Peak memory (MiB)", Box::new(|r: &BenchRow| r.peak_bytes.map(|b| format!("{:.1}", b as f64 / 1048576.0)))),
        ];
        for (title, cell) in &tables {
            let _ = writeln!(s, "### {title}\n");
            let _ = write!(s, "| Model |");
            for l in &lengths {
                let _ = write!(s, " {l} |");
            }
            let _ = write!(s, "\n|---|");
            for _ in &lengths {
                let _ = write!(s, "---:|");
            }
            s.push('\n');
            for &v in &variants {
                let _ = write!(s, "| {} |", v.label());
                for &l in &lengths {
                    let c = self.row(l, v).and_then(cell).unwrap_or_else(|| "skipped".into());
                    let _ = write!(s, " {c} |");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "Median of {} repetitions. Memory is {}.",
            self.reps,
            if self.measured_memory { "peak allocation above the pre-run baseline" } else { "estimated from session and logit sizes" }
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let (m, c, r2) = linear_fit(&xs, &ys);
        assert!((m - 3.0).abs() < 1e-12 && (c + 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&xs, &[1.0, 0.0, 1.0, 0.0]);
        assert!(r2 < 0.5);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn tiny() -> BenchConfig {
        let mut model = ModelSpec::desk(32, 8);
        model.n_layers = 2;
        model.resona.chunk_size = 4;
        BenchConfig {
            lengths: vec![16, 32, 64],
            reps: 3,
            generate: 4,
            model,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn grid_structure_is_deterministic() {
        let a = run_bench::<f32>(&tiny(), None).unwrap();
        let b = run_bench::<f32>(&tiny(), None).unwrap();
        let shape = |r: &BenchReport| r.rows.iter().map(|r| (r.len, r.variant, r.peak_bytes)).collect::<Vec<_>>();
        assert_eq!(shape(&a), shape(&b));
        assert_eq!(a.rows.len(), 6);
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("length,variant,prefill_ms,generate_128_ms,peak_memory_bytes"));
        let md = a.to_markdown();
        assert!(md.contains("| Model | 16 | 32 | 64 |"));
        assert!(md.contains("| +resona |"));
        assert_eq!(a.ratios(|r| r.prefill_ms).len(), 3);
    }

    #[test]
    fn over_budget_rows_are_skipped() {
        let cfg = BenchConfig {
            budget_bytes: Some(tiny().estimate_bytes::<f32>(32)),
            ..tiny()
        };
        let r = run_bench::<f32>(&cfg, None).unwrap();
        assert!(r.row(64, Variant::Baseline).unwrap().skipped.is_some());
        assert!(r.row(32, Variant::Resona).unwrap().skipped.is_none());
        assert!(r.to_markdown().contains("skipped"));
        assert!(r.to_csv().contains("skipped: "));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(BenchConfig { reps: 2, ..tiny() }.validate().is_err());
        assert!(BenchConfig { lengths: vec![64, 32], ..tiny() }.validate().is_err());
    }
}
