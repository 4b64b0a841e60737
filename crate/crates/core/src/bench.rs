//! Sequence-length scaling benchmark: recurrence versus attention.
//!
//! Times three workloads over a doubling ladder of sequence lengths with
//! identical per-token dimensions:
//!
//! * the sequential selective scan,
//! * its parallel prefix-scan formulation, and
//! * exact full-window multi-head self-attention, evaluated streamingly
//!   (online softmax) so memory stays O(L) and 65k-token windows fit.
//!
//! Each point is the median of adaptively repeated runs; the headline
//! statistics are log-log fitted exponents (the scan should sit near 1,
//! attention near 2) and the time ratio across one doubling.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ssm::selective_scan;
use crate::{Error, Result, Tensor};

/// Sweep and measurement knobs.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    /// Sequence lengths, ascending.
    pub lengths: Vec<usize>,
    /// Token width shared by all workloads (and attention embed width).
    pub d_model: usize,
    /// States per channel in the scans.
    pub d_state: usize,
    /// Attention heads; must divide `d_model`.
    pub heads: usize,
    /// Repeat each measurement until this much time is covered.
    pub target_sample_secs: f64,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            lengths: (10..=16).map(|p| 1usize << p).collect(), // 1024..=65536
            d_model: 16,
            d_state: 16,
            heads: 2,
            target_sample_secs: 0.02,
            seed: 0,
        }
    }
}

impl BenchSettings {
    /// A seconds-long variant for plumbing tests.
    pub fn smoke() -> Self {
        Self {
            lengths: vec![256, 512, 1024],
            target_sample_secs: 0.005,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 2 {
            return Err(Error::config("lengths: need at least two points to fit a slope"));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lengths: must be strictly ascending"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "heads: {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.d_state == 0 {
            return Err(Error::config("d_state: must be at least 1"));
        }
        Ok(())
    }
}

/// One measured point.
#[derive(Debug, Clone, Copy)]
pub struct BenchPoint {
    pub l: usize,
    pub seconds: f64,
}

/// All points of one workload.
#[derive(Debug, Clone)]
pub struct BenchSeries {
    pub name: &'static str,
    pub points: Vec<BenchPoint>,
}

impl BenchSeries {
    /// Least-squares slope of ln(time) against ln(L).
    pub fn exponent(&self) -> f64 {
        let n = self.points.len() as f64;
        let xs: Vec<f64> = self.points.iter().map(|p| (p.l as f64).ln()).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.seconds.ln()).collect();
        let (mx, my) = (
            xs.iter().sum::<f64>() / n,
            ys.iter().sum::<f64>() / n,
        );
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        cov / var
    }

    /// Time ratio between two measured lengths.
    pub fn ratio(&self, from: usize, to: usize) -> Option<f64> {
        let t_from = self.points.iter().find(|p| p.l == from)?.seconds;
        let t_to = self.points.iter().find(|p| p.l == to)?.seconds;
        Some(t_to / t_from)
    }
}

/// The full sweep.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub series: Vec<BenchSeries>,
    pub settings: BenchSettings,
}

impl BenchReport {
    pub fn get(&self, name: &str) -> Option<&BenchSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    /// `length,<series...>` rows plus trailing exponent comments.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length");
        for series in &self.series {
            s.push(',');
            s.push_str(&series.name.replace(' ', "_"));
        }
        s.push('\n');
        for (i, p) in self.series[0].points.iter().enumerate() {
            s.push_str(&p.l.to_string());
            for series in &self.series {
                s.push_str(&format!(",{:.6e}", series.points[i].seconds));
            }
            s.push('\n');
        }
        for series in &self.series {
            s.push_str(&format!(
                "# exponent {} {:.4}\n",
                series.name.replace(' ', "_"),
                series.exponent()
            ));
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("{:<8}", "L");
        for series in &self.series {
            s.push_str(&format!(" {:>16}", series.name));
        }
        s.push('\n');
        for (i, p) in self.series[0].points.iter().enumerate() {
            s.push_str(&format!("{:<8}", p.l));
            for series in &self.series {
                s.push_str(&format!(" {:>15.3}ms", series.points[i].seconds * 1e3));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<8}", "slope"));
        for series in &self.series {
            s.push_str(&format!(" {:>16.3}", series.exponent()));
        }
        s.push('\n');
        s
    }
}

/// Median of adaptively repeated timings of `work`.
///
/// One warm-up run sizes the repeat count so the total stays near
/// `target_secs`; heavy cases run once.
fn time_median(target_secs: f64, mut work: impl FnMut()) -> f64 {
    let t0 = Instant::now();
    work();
    let first = t0.elapsed().as_secs_f64();
    let reps = (target_secs / first.max(1e-9)).ceil() as usize;
    let reps = reps.clamp(1, 101);
    if reps == 1 {
        return first;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        work();
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Exact multi-head self-attention over one `[l, c]` window, computed
/// row-streamingly with the online-softmax recurrence: O(l^2) arithmetic
/// but O(l) live memory, no score matrix. Returns the output sum as a
/// use-sink so the optimizer cannot discard the work.
fn streaming_mhsa(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> f64 {
    let (l, c) = (q.shape()[0], q.shape()[1]);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    (0..l)
        .into_par_iter()
        .map(|i| {
            let mut sink = 0.0;
            for h in 0..heads {
                let qi = &qd[i * c + h * dh..i * c + (h + 1) * dh];
                // Running max, normalizer, and weighted value sum.
                let mut m = f64::NEG_INFINITY;
                let mut z = 0.0;
                let mut acc = vec![0.0; dh];
                for j in 0..l {
                    let kj = &kd[j * c + h * dh..j * c + (h + 1) * dh];
                    let score = scale
                        * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    let m_new = m.max(score);
                    let rescale = if m.is_finite() { (m - m_new).exp() } else { 0.0 };
                    let w = (score - m_new).exp();
                    z = z * rescale + w;
                    let vj = &vd[j * c + h * dh..j * c + (h + 1) * dh];
                    for (a, &vv) in acc.iter_mut().zip(vj) {
                        *a = *a * rescale + w * vv;
                    }
                    m = m_new;
                }
                sink += acc.iter().sum::<f64>() / z;
            }
            sink
        })
        .sum()
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_shape_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

/// Runs the sweep. Workload inputs are drawn once per length; the black
/// hole accumulator keeps every run live.
pub fn run_bench(settings: &BenchSettings) -> Result<BenchReport> {
    settings.validate()?;
    let (d, n) = (settings.d_model, settings.d_state);
    let mut seq = BenchSeries { name: "scan sequential", points: Vec::new() };
    let mut par = BenchSeries { name: "scan parallel", points: Vec::new() };
    let mut att = BenchSeries { name: "mhsa full window", points: Vec::new() };
    let mut black_hole = 0.0f64;

    for &l in &settings.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ l as u64);
        let x = rand_mat(&mut rng, l, d);
        let delta = Tensor::from_shape_fn(&[l, d], |_| rng.gen_range(1e-3..0.2));
        let a = Tensor::from_shape_fn(&[d, n], |_| rng.gen_range(-2.0..-0.01));
        let b = rand_mat(&mut rng, l, n);
        let c = rand_mat(&mut rng, l, n);

        for (series, parallel) in [(&mut seq, false), (&mut par, true)] {
            let mut sink = 0.0;
            let secs = time_median(settings.target_sample_secs, || {
                let out = selective_scan(&x, &delta, &a, &b, &c, None, parallel)
                    .expect("bench shapes are valid");
                sink += out.y.data()[l / 2];
            });
            black_hole += sink;
            series.points.push(BenchPoint { l, seconds: secs });
        }

        let q = rand_mat(&mut rng, l, d);
        let k = rand_mat(&mut rng, l, d);
        let v = rand_mat(&mut rng, l, d);
        let mut sink = 0.0;
        let secs = time_median(settings.target_sample_secs, || {
            sink += streaming_mhsa(&q, &k, &v, settings.heads);
        });
        black_hole += sink;
        att.points.push(BenchPoint { l, seconds: secs });
    }

    if !black_hole.is_finite() {
        return Err(Error::contract("benchmark workloads produced non-finite output"));
    }
    Ok(BenchReport {
        series: vec![seq, par, att],
        settings: settings.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fitting_recovers_known_exponents() {
        let series = BenchSeries {
            name: "synthetic",
            points: (8..13)
                .map(|p| {
                    let l = 1usize << p;
                    BenchPoint { l, seconds: 3.5e-9 * (l as f64).powf(1.97) }
                })
                .collect(),
        };
        assert!((series.exponent() - 1.97).abs() < 1e-9);
        let r = series.ratio(256, 512).unwrap();
        assert!((r - 2f64.powf(1.97)).abs() < 1e-9);
        assert!(series.ratio(256, 999).is_none());
    }

    #[test]
    fn streaming_attention_matches_the_naive_form() {
        // Small case cross-checked against materialized softmax rows.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, c, heads) = (7, 8, 2);
        let q = rand_mat(&mut rng, l, c);
        let k = rand_mat(&mut rng, l, c);
        let v = rand_mat(&mut rng, l, c);
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut want = 0.0;
        for i in 0..l {
            for h in 0..heads {
                let scores: Vec<f64> = (0..l)
                    .map(|j| {
                        scale
                            * (0..dh)
                                .map(|t| q.at(&[i, h * dh + t]) * k.at(&[j, h * dh + t]))
                                .sum::<f64>()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for t in 0..dh {
                    want += (0..l)
                        .map(|j| (scores[j] - m).exp() * v.at(&[j, h * dh + t]))
                        .sum::<f64>()
                        / z;
                }
            }
        }
        let got = streaming_mhsa(&q, &k, &v, heads);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn smoke_sweep_produces_a_full_report() {
        let report = run_bench(&BenchSettings::smoke()).unwrap();
        assert_eq!(report.series.len(), 3);
        for series in &report.series {
            assert_eq!(series.points.len(), 3);
            assert!(series.points.iter().all(|p| p.seconds > 0.0));
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("length,scan_sequential,scan_parallel,mhsa_full_window"));
        assert_eq!(csv.lines().filter(|l| l.starts_with('#')).count(), 3);
        let table = report.render_table();
        assert!(table.contains("slope"));
        assert!(report.get("scan sequential").is_some());
        assert!(report.get("nope").is_none());
    }

    #[test]
    fn degenerate_settings_are_rejected() {
        let mut s = BenchSettings::default();
        s.lengths = vec![1024];
        assert!(s.validate().is_err());
        let mut s = BenchSettings::default();
        s.lengths = vec![1024, 512];
        assert!(s.validate().is_err());
        let mut s = BenchSettings::default();
        s.heads = 3;
        assert!(s.validate().is_err());
    }
}
