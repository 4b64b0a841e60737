//! Runtime self-verification suites.
//!
//! Each suite re-derives a handful of the crate's load-bearing invariants
//! from scratch — closed forms, round trips, exactness guarantees — and
//! reports one row per check. The suites back the `check` subcommand: a
//! fresh build passes everything in a few seconds, and any failure names
//! the assertion with the measured number next to its tolerance.
//!
//! [`FaultInjection`] is a deliberate saboteur for testing the harness
//! itself: `ScanSign` flips the sign of every scan output the checker
//! computes, which must turn the scan suites red.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{validity_mask, warp_backward, Boundary, FlowField};
use crate::attention::{partition_map, SwsaParams, WindowSpec};
use crate::autodiff::{grad_check, GradCheckConfig, Tape};
use crate::data::{gen_synthetic, ClipSpec, Motion, Pattern};
use crate::gsm::{
    flatten_tokens, gather, plan_window, unflatten_tokens, AnchorStrategy, FeatureWindow,
    FlattenOrder, PassDirection,
};
use crate::math::softplus;
use crate::pipeline::{bicubic_up, clip_loss, super_resolve, Model, ModelConfig, CHARBONNIER_EPS};
use crate::pipeline::cosine_lr;
use crate::ssm::{
    causal_conv1d, combine, discretize_zoh, invert_perm, lti_kernel, lti_scan, selective_scan,
    ScanDirection, TokenGrid,
};
use crate::tensor::{
    bicubic_resize, luminance, psnr, read_ppm_bytes, read_tensor_bytes, ssim, write_ppm_bytes,
    write_tensor_bytes, ImageU8,
};
use crate::{Result, Tensor};

/// Deliberate defects for exercising the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Negate every scan output the checker computes.
    ScanSign,
}

/// One executed check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Measured value against its tolerance (or the error that aborted).
    pub detail: String,
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    /// Plain-text table, one row per check plus a summary line.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:<44} {:<6} detail\n",
            "suite", "check", "status"
        );
        for r in &self.results {
            s.push_str(&format!(
                "{:<10} {:<44} {:<6} {}\n",
                r.suite,
                r.name,
                if r.passed { "ok" } else { "FAIL" },
                r.detail
            ));
        }
        let failed = self.results.iter().filter(|r| !r.passed).count();
        s.push_str(&format!(
            "{} checks, {} failed\n",
            self.results.len(),
            failed
        ));
        s
    }
}

/// Suites in execution order; the filter below matches on these names.
pub fn suite_names() -> &'static [&'static str] {
    &[
        "tensor", "autodiff", "ssm", "align", "gsm", "attention", "data", "pipeline",
    ]
}

/// Runs every suite whose name contains `filter` (empty = all).
pub fn run_checks(filter: &str, fault: Option<FaultInjection>) -> CheckReport {
    let suites: &[(&'static str, fn(&mut Ctx))] = &[
        ("tensor", tensor_suite),
        ("autodiff", autodiff_suite),
        ("ssm", ssm_suite),
        ("align", align_suite),
        ("gsm", gsm_suite),
        ("attention", attention_suite),
        ("data", data_suite),
        ("pipeline", pipeline_suite),
    ];
    let mut ctx = Ctx {
        fault,
        suite: "",
        results: Vec::new(),
    };
    for (name, run) in suites {
        if !name.contains(filter) {
            continue;
        }
        ctx.suite = name;
        run(&mut ctx);
    }
    CheckReport {
        results: ctx.results,
    }
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// Pass/fail with the formatted measurement either way.
type Outcome = std::result::Result<String, String>;

struct Ctx {
    fault: Option<FaultInjection>,
    suite: &'static str,
    results: Vec<CheckResult>,
}

impl Ctx {
    /// Runs one check; an `Err` from the body is a failure, not a panic.
    fn check(&mut self, name: &'static str, body: impl FnOnce(&Ctx) -> Result<Outcome>) {
        let (passed, detail) = match body(self) {
            Ok(Ok(d)) => (true, d),
            Ok(Err(d)) => (false, d),
            Err(e) => (false, format!("errored: {e}")),
        };
        self.results.push(CheckResult {
            suite: self.suite,
            name,
            passed,
            detail,
        });
    }

    /// Sign applied to scan outputs computed by the checker.
    fn scan_sign(&self) -> f64 {
        match self.fault {
            Some(FaultInjection::ScanSign) => -1.0,
            None => 1.0,
        }
    }
}

fn within(value: f64, tol: f64) -> Outcome {
    let msg = format!("{value:.3e} (tol {tol:.1e})");
    if value <= tol && value.is_finite() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn exactly(value: f64) -> Outcome {
    let msg = format!("{value:.3e} (want 0 exactly)");
    if value == 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn claim(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

fn tensor_suite(ctx: &mut Ctx) {
    ctx.check("shape_product_equals_length", |_| {
        let t = Tensor::zeros(&[3, 4, 5]);
        Ok(claim(
            t.len() == 60 && t.shape().iter().product::<usize>() == t.len(),
            format!("{:?} -> {} elements", t.shape(), t.len()),
        ))
    });

    ctx.check("tensor_bytes_round_trip", |_| {
        let t = rand_tensor(&[2, 5, 3], -2.0, 2.0, 11);
        let back = read_tensor_bytes(&write_tensor_bytes(&t))?;
        Ok(exactly(t.max_abs_diff(&back)))
    });

    ctx.check("ppm_round_trip_is_lossless_on_u8", |_| {
        let t = rand_tensor(&[3, 6, 7], 0.0, 1.0, 12);
        let img = ImageU8::from_tensor(&t)?;
        let back = read_ppm_bytes(&write_ppm_bytes(&img))?;
        Ok(exactly(img.to_tensor().max_abs_diff(&back.to_tensor())))
    });

    ctx.check("bicubic_resize_preserves_constants", |_| {
        let t = Tensor::full(&[3, 5, 5], 0.37);
        let up = bicubic_resize(&t, 20, 20)?;
        let down = bicubic_resize(&up, 5, 5)?;
        let worst = up
            .data()
            .iter()
            .chain(down.data())
            .map(|v| (v - 0.37).abs())
            .fold(0.0f64, f64::max);
        Ok(within(worst, 1e-12))
    });

    ctx.check("psnr_of_identical_images_hits_the_cap", |_| {
        let t = rand_tensor(&[1, 8, 8], 0.0, 1.0, 13);
        Ok(exactly(psnr(&t, &t, 1.0)? - 100.0))
    });

    ctx.check("psnr_matches_the_closed_form", |_| {
        let a = rand_tensor(&[1, 8, 8], 0.2, 0.8, 14);
        let b = a.map(|v| v + 0.1);
        // mse = 0.01 against peak 1 -> exactly 20 dB.
        Ok(within((psnr(&a, &b, 1.0)? - 20.0).abs(), 1e-9))
    });

    ctx.check("ssim_of_identical_images_is_one", |_| {
        let t = rand_tensor(&[1, 9, 9], 0.0, 1.0, 15);
        Ok(within((ssim(&t, &t, 1.0)? - 1.0).abs(), 1e-12))
    });

    ctx.check("luminance_weights_form_a_partition", |_| {
        let t = Tensor::full(&[3, 4, 4], 0.61);
        let y = luminance(&t)?;
        let worst = y.data().iter().map(|v| (v - 0.61).abs()).fold(0.0, f64::max);
        Ok(within(worst, 1e-12))
    });
}

fn autodiff_suite(ctx: &mut Ctx) {
    ctx.check("fanout_gradients_accumulate_additively", |_| {
        // y = sum(2x) + sum(x*x): dy/dx = 2 + 2x, both branches share x.
        let x = rand_tensor(&[7], -1.5, 1.5, 21);
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let two_x = tape.scale(xid, 2.0);
        let sq = tape.square(xid);
        let sum = tape.add(two_x, sq)?;
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss)?;
        let g = grads[xid.index()].as_ref().expect("x is used");
        let worst = (0..x.len())
            .map(|i| (g.data()[i] - (2.0 + 2.0 * x.data()[i])).abs())
            .fold(0.0f64, f64::max);
        Ok(within(worst, 1e-12))
    });

    ctx.check("sum_of_branches_differentiates_branchwise", |_| {
        // d(f+g) == df + dg computed on separate tapes.
        let x = rand_tensor(&[4, 3], -1.0, 1.0, 22);
        let joint = {
            let mut tape = Tape::new();
            let xid = tape.input(x.clone());
            let f = tape.sigmoid(xid);
            let g = tape.gelu(xid);
            let s = tape.add(f, g)?;
            let loss = tape.sum_all(s);
            tape.backward(loss)?[xid.index()].clone().expect("used")
        };
        let single = |which: usize| -> Result<Tensor> {
            let mut tape = Tape::new();
            let xid = tape.input(x.clone());
            let y = if which == 0 { tape.sigmoid(xid) } else { tape.gelu(xid) };
            let loss = tape.sum_all(y);
            Ok(tape.backward(loss)?[xid.index()].clone().expect("used"))
        };
        let apart = single(0)?.add(&single(1)?)?;
        Ok(within(joint.max_abs_diff(&apart), 1e-12))
    });

    ctx.check("layer_norm_and_linear_pass_finite_differences", |_| {
        let inputs = [
            ("x", rand_tensor(&[5, 6], -1.0, 1.0, 23)),
            ("w", rand_tensor(&[4, 6], -0.6, 0.6, 24)),
            ("b", rand_tensor(&[4], -0.2, 0.2, 25)),
            ("gamma", rand_tensor(&[4], 0.5, 1.5, 26)),
            ("beta", rand_tensor(&[4], -0.3, 0.3, 27)),
        ];
        let report = grad_check(
            &inputs,
            |tape, ids| {
                let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
                let n = tape.layer_norm(y, ids[3], ids[4], 1e-5)?;
                let sq = tape.square(n);
                Ok(tape.mean_all(sq))
            },
            &GradCheckConfig { step: 1e-5, budget: 24, seed: 0 },
        )?;
        Ok(within(report.worst, 1e-4))
    });

    ctx.check("softmax_rows_stay_normalized", |_| {
        let x = rand_tensor(&[6, 5], -3.0, 3.0, 28);
        let mut tape = Tape::new();
        let xid = tape.input(x);
        let s = tape.softmax(xid, 1)?;
        let sm = tape.value(s);
        let worst = (0..6)
            .map(|r| ((0..5).map(|c| sm.at(&[r, c])).sum::<f64>() - 1.0).abs())
            .fold(0.0f64, f64::max);
        Ok(within(worst, 1e-12))
    });
}

fn ssm_suite(ctx: &mut Ctx) {
    ctx.check("step_widths_stay_positive", |_| {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let min = (0..10_000)
            .map(|_| softplus(rng.gen_range(-30.0..30.0)))
            .fold(f64::INFINITY, f64::min);
        Ok(claim(min > 0.0, format!("min softplus {min:.3e} over 1e4 draws")))
    });

    ctx.check("zoh_matches_the_closed_form", |_| {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (delta, a, b) = (
                rng.gen_range(1e-3..0.5),
                rng.gen_range(-3.0..-1e-3),
                rng.gen_range(-2.0..2.0),
            );
            let (abar, bbar) = discretize_zoh(delta, a, b);
            worst = worst
                .max((abar - (delta * a).exp()).abs())
                .max((bbar - ((delta * a).exp() - 1.0) / a * b).abs());
        }
        let (_, bbar0) = discretize_zoh(0.25, 0.0, 1.5);
        worst = worst.max((bbar0 - 0.25 * 1.5).abs());
        Ok(within(worst, 1e-12))
    });

    ctx.check("discrete_spectrum_is_contractive", |_| {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let max = (0..10_000)
            .map(|_| {
                let (delta, a) = (rng.gen_range(0.0..2.0), rng.gen_range(-5.0..0.0));
                discretize_zoh(delta, a, 1.0).0.abs()
            })
            .fold(0.0f64, f64::max);
        Ok(claim(max <= 1.0, format!("max |abar| {max:.12} over 1e4 draws")))
    });

    ctx.check("recurrence_and_kernel_agree", |ctx| {
        let l = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let u: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (abar, bbar) = discretize_zoh(0.1, -0.8, 1.3);
        let (ab, bb, c) = (vec![abar; l], vec![bbar; l], vec![0.7; l]);
        let direct: Vec<f64> = lti_scan(&u, &ab, &bb, &c, 0.4)
            .iter()
            .map(|y| y * ctx.scan_sign())
            .collect();
        let mut kernel = lti_kernel(&ab, &bb, &c, l);
        kernel[0] += 0.4; // fold the passthrough into the kernel tap
        let conv = causal_conv1d(&u, &kernel);
        let worst = direct
            .iter()
            .zip(&conv)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        Ok(within(worst, 1e-9))
    });

    ctx.check("sequential_and_parallel_scans_agree", |ctx| {
        let (l, d, n) = (256, 3, 4);
        let x = rand_tensor(&[l, d], -1.0, 1.0, 35);
        let delta = rand_tensor(&[l, d], 1e-3, 0.3, 36);
        let a = rand_tensor(&[d, n], -2.0, -0.01, 37);
        let b = rand_tensor(&[l, n], -1.0, 1.0, 38);
        let c = rand_tensor(&[l, n], -1.0, 1.0, 39);
        let seq = selective_scan(&x, &delta, &a, &b, &c, None, false)?;
        let par = selective_scan(&x, &delta, &a, &b, &c, None, true)?;
        let sign = ctx.scan_sign();
        let worst = seq
            .y
            .data()
            .iter()
            .zip(par.y.data())
            .map(|(s, p)| (s - p * sign).abs())
            .fold(0.0f64, f64::max);
        Ok(within(worst, 1e-8))
    });

    ctx.check("prefix_combine_is_associative", |_| {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut worst = 0.0f64;
        for _ in 0..300 {
            let mut e = || (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (p, q, r) = (e(), e(), e());
            let left = combine(combine(p, q), r);
            let right = combine(p, combine(q, r));
            worst = worst.max((left.0 - right.0).abs()).max((left.1 - right.1).abs());
        }
        Ok(within(worst, 1e-12))
    });

    ctx.check("direction_orders_are_permutations", |_| {
        let grid = TokenGrid::new(3, 4, 5, true)?;
        for dir in [
            ScanDirection::Forward,
            ScanDirection::Backward,
            ScanDirection::TransposedForward,
            ScanDirection::TransposedBackward,
        ] {
            let perm = dir.order_on(&grid);
            let inv = invert_perm(&perm);
            let mut seen = vec![false; perm.len()];
            for &p in &perm {
                if p >= seen.len() || seen[p] {
                    return Ok(Err(format!("{dir:?} repeats or escapes index {p}")));
                }
                seen[p] = true;
            }
            for (i, &p) in perm.iter().enumerate() {
                if inv[p] != i {
                    return Ok(Err(format!("{dir:?} inverse breaks at {i}")));
                }
            }
        }
        Ok(Ok("4 directions x 60 tokens".into()))
    });
}

fn align_suite(ctx: &mut Ctx) {
    ctx.check("zero_flow_warp_is_the_identity", |_| {
        let feat = rand_tensor(&[2, 6, 7], -1.0, 1.0, 41);
        let out = warp_backward(&feat, &FlowField::zero(6, 7), Boundary::Replicate)?;
        Ok(exactly(out.max_abs_diff(&feat)))
    });

    ctx.check("integer_shifts_warp_exactly", |_| {
        let feat = rand_tensor(&[1, 6, 8], -1.0, 1.0, 42);
        let flow = FlowField::translation(6, 8, 2.0, 0.0);
        let out = warp_backward(&feat, &flow, Boundary::Replicate)?;
        // out(y, x) = feat(y, x+2) wherever x+2 stays on the grid.
        let worst = (0..6)
            .flat_map(|y| (0..6).map(move |x| (y, x)))
            .map(|(y, x)| (out.at(&[0, y, x]) - feat.at(&[0, y, x + 2])).abs())
            .fold(0.0f64, f64::max);
        Ok(exactly(worst))
    });

    ctx.check("constant_features_survive_any_flow", |_| {
        let feat = Tensor::full(&[1, 7, 7], 0.83);
        let flow = FlowField::rotation(7, 7, 3.0, 3.0, 0.4);
        let out = warp_backward(&feat, &flow, Boundary::Replicate)?;
        let worst = out.data().iter().map(|v| (v - 0.83).abs()).fold(0.0, f64::max);
        Ok(within(worst, 1e-12))
    });

    ctx.check("masks_flag_exactly_the_escaping_samples", |_| {
        let (h, w) = (5, 8);
        let flow = FlowField::translation(h, w, 2.5, 0.0);
        let mask = validity_mask(&flow);
        let mut bad = 0usize;
        for y in 0..h {
            for x in 0..w {
                let expect = (x as f64 + 2.5) <= (w - 1) as f64;
                if mask.at(y, x) != expect {
                    bad += 1;
                }
            }
        }
        Ok(claim(
            bad == 0,
            format!("{bad} mismatches, valid fraction {:.3}", mask.fraction_valid()),
        ))
    });

    ctx.check("small_rotations_match_their_linearization", |_| {
        // The dropped second-order term is (1 - cos eps) * radius, so the
        // 1e-6 tolerance at eps = 1e-3 needs a grid radius under 2 px.
        let (h, w, eps) = (4, 4, 1e-3);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let flow = FlowField::rotation(h, w, cx, cy, eps);
        let mut worst = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let lin_dx = eps * (y as f64 - cy);
                let lin_dy = -eps * (x as f64 - cx);
                worst = worst
                    .max((flow.dx_at(y, x) - lin_dx).abs())
                    .max((flow.dy_at(y, x) - lin_dy).abs());
            }
        }
        Ok(within(worst, 1e-6))
    });
}

/// Zero flows everywhere but the anchor slot (which must stay `None`).
fn zero_flows(k: usize, anchor: usize, h: usize, w: usize) -> Vec<Option<FlowField>> {
    (0..k)
        .map(|slot| (slot != anchor).then(|| FlowField::zero(h, w)))
        .collect()
}

fn gsm_suite(ctx: &mut Ctx) {
    ctx.check("window_plans_keep_the_anchor_in_place", |_| {
        let cases = [
            (7usize, 0usize, 5usize, AnchorStrategy::Center, PassDirection::Forward),
            (7, 6, 5, AnchorStrategy::Center, PassDirection::Backward),
            (5, 2, 3, AnchorStrategy::Forward, PassDirection::Forward),
            (5, 2, 3, AnchorStrategy::Forward, PassDirection::Backward),
            (1, 0, 3, AnchorStrategy::Center, PassDirection::Forward),
        ];
        for (t_len, anchor, k, strat, pass) in cases {
            let plan = plan_window(t_len, anchor, k, strat, pass)?;
            if plan.ids.len() != k || plan.ids[plan.anchor_slot] != anchor {
                return Ok(Err(format!(
                    "t={t_len} anchor={anchor} k={k} -> {:?} slot {}",
                    plan.ids, plan.anchor_slot
                )));
            }
            if plan.ids.iter().any(|&id| id >= t_len) {
                return Ok(Err(format!("plan escapes the sequence: {:?}", plan.ids)));
            }
        }
        Ok(Ok("5 plans, anchors pinned, ids clamped".into()))
    });

    ctx.check("nonzero_anchor_flows_are_rejected", |_| {
        let frames = vec![Tensor::zeros(&[1, 4, 4]); 3];
        let bad = FlowField::translation(4, 4, 1.0, 0.0);
        let gather_flows = vec![None, Some(bad), None];
        let scatter_flows = vec![None, None, None];
        let err = FeatureWindow::new(frames, 1, gather_flows, scatter_flows).err();
        Ok(claim(
            err.is_some(),
            format!("constructor said: {}", err.map_or("(accepted)".into(), |e| e.to_string())),
        ))
    });

    ctx.check("gathered_anchor_slice_is_untouched", |_| {
        let frames: Vec<Tensor> =
            (0..3).map(|k| rand_tensor(&[2, 5, 5], -1.0, 1.0, 50 + k)).collect();
        let anchor_frame = frames[1].clone();
        let drift = FlowField::translation(5, 5, 0.6, -0.4);
        let window = FeatureWindow::new(
            frames,
            1,
            vec![Some(drift.clone()), None, Some(drift.clone())],
            vec![Some(drift.clone()), None, Some(drift)],
        )?;
        let stack = gather(&window)?;
        Ok(exactly(stack.slice(1).max_abs_diff(&anchor_frame)))
    });

    ctx.check("token_flattening_round_trips", |_| {
        let frames: Vec<Tensor> =
            (0..3).map(|k| rand_tensor(&[2, 4, 6], -1.0, 1.0, 60 + k)).collect();
        let window = FeatureWindow::new(frames.clone(), 1, zero_flows(3, 1, 4, 6), zero_flows(3, 1, 4, 6))?;
        let stack = gather(&window)?;
        let mut worst = 0.0f64;
        for order in [FlattenOrder::TemporalFirst, FlattenOrder::SpatialFirst] {
            let seq = flatten_tokens(&stack, order);
            let back = unflatten_tokens(&seq, order, 3, 4, 6)?;
            for (k, f) in back.iter().enumerate() {
                worst = worst.max(f.max_abs_diff(&frames[k]));
            }
        }
        Ok(exactly(worst))
    });

    ctx.check("temporal_first_keeps_sites_adjacent", |_| {
        let frames: Vec<Tensor> =
            (0..3).map(|k| rand_tensor(&[1, 2, 3], -1.0, 1.0, 70 + k)).collect();
        let window = FeatureWindow::new(frames.clone(), 1, zero_flows(3, 1, 2, 3), zero_flows(3, 1, 2, 3))?;
        let seq = flatten_tokens(&gather(&window)?, FlattenOrder::TemporalFirst);
        let mut worst = 0.0f64;
        for site in 0..6 {
            for k in 0..3 {
                let token = seq.at(&[site * 3 + k, 0]);
                worst = worst.max((token - frames[k].at(&[0, site / 3, site % 3])).abs());
            }
        }
        Ok(exactly(worst))
    });
}

fn attention_suite(ctx: &mut Ctx) {
    ctx.check("window_volume_counts_tokens", |_| {
        let win = WindowSpec::new(2, 4, 4)?;
        Ok(claim(win.volume() == 32, format!("volume {}", win.volume())))
    });

    ctx.check("partitioning_restores_every_token", |_| {
        for shifted in [false, true] {
            let win = WindowSpec::new(2, 4, 4)?;
            let map = partition_map(3, 5, 6, &win, shifted);
            // scatter must undo gather on every original row.
            for o in 0..(3 * 5 * 6) {
                let r = map.scatter[o];
                if map.gather[r] != o {
                    return Ok(Err(format!("shifted={shifted}: row {o} lands on {}", map.gather[r])));
                }
            }
            if map.gather.len() != map.windows * map.window_len {
                return Ok(Err("window count disagrees with row count".into()));
            }
        }
        Ok(Ok("plain and shifted maps invert on 90 tokens".into()))
    });

    ctx.check("identical_tokens_stay_identical", |_| {
        // Attention, LN, and the MLP are all token-wise permutation
        // equivariant, so a constant token sequence must stay constant.
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let win = WindowSpec::new(2, 2, 2)?;
        let params = SwsaParams::new(8, 2, win, true, true, &mut rng)?;
        let token = rand_tensor(&[1, 8], -1.0, 1.0, 81);
        let x = Tensor::from_shape_fn(&[2 * 4 * 4, 8], |i| token.at(&[0, i[1]]));
        let y = params.forward(&x, (2, 4, 4))?;
        let mut worst = 0.0f64;
        for r in 1..(2 * 4 * 4) {
            for c in 0..8 {
                worst = worst.max((y.at(&[r, c]) - y.at(&[0, c])).abs());
            }
        }
        Ok(within(worst, 1e-12))
    });

    ctx.check("layer_norm_standardizes_rows", |_| {
        let x = rand_tensor(&[5, 16], -2.0, 2.0, 82);
        let mut tape = Tape::new();
        let xid = tape.input(x);
        let gamma = tape.input(Tensor::ones(&[16]));
        let beta = tape.input(Tensor::zeros(&[16]));
        let n = tape.layer_norm(xid, gamma, beta, 1e-12)?;
        let y = tape.value(n);
        let mut worst = 0.0f64;
        for r in 0..5 {
            let mean: f64 = (0..16).map(|c| y.at(&[r, c])).sum::<f64>() / 16.0;
            let var: f64 = (0..16).map(|c| (y.at(&[r, c]) - mean).powi(2)).sum::<f64>() / 16.0;
            worst = worst.max(mean.abs()).max((var - 1.0).abs());
        }
        Ok(within(worst, 1e-9))
    });
}

fn data_suite(ctx: &mut Ctx) {
    ctx.check("zero_motion_clips_are_static", |_| {
        let spec = ClipSpec::new(
            Pattern::Checkerboard { cell: 6.0 },
            Motion::Zero,
            3,
            8,
            8,
            4,
            91,
        );
        let clip = gen_synthetic(&spec)?;
        let worst = (1..3)
            .map(|t| clip.hr_frame(t).max_abs_diff(&clip.hr_frame(0)))
            .fold(0.0f64, f64::max);
        Ok(exactly(worst))
    });

    ctx.check("generation_is_seed_deterministic", |_| {
        let spec = ClipSpec::new(
            Pattern::FourierTexture { waves: 5 },
            Motion::Translation { dx: 1.5, dy: -0.5 },
            3,
            8,
            8,
            4,
            92,
        );
        let a = gen_synthetic(&spec)?;
        let b = gen_synthetic(&spec)?;
        Ok(exactly(a.lr.max_abs_diff(&b.lr)))
    });

    ctx.check("flow_radius_bounds_the_pair_count", |_| {
        let spec = ClipSpec::new(
            Pattern::GaussianBlobs { count: 3 },
            Motion::Translation { dx: 1.0, dy: 1.0 },
            5,
            8,
            8,
            4,
            93,
        )
        .with_flow_radius(2);
        let clip = gen_synthetic(&spec)?;
        Ok(claim(
            clip.flows.len() == 14,
            format!("{} ordered pairs (want 14)", clip.flows.len()),
        ))
    });

    ctx.check("rendered_values_stay_in_image_range", |_| {
        let spec = ClipSpec::new(
            Pattern::FourierTexture { waves: 8 },
            Motion::Rotation { rate: 0.02 },
            3,
            10,
            10,
            4,
            94,
        );
        let clip = gen_synthetic(&spec)?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in clip.hr.data().iter().chain(clip.lr.data()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        Ok(claim(
            (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi),
            format!("range [{lo:.4}, {hi:.4}]"),
        ))
    });
}

fn pipeline_suite(ctx: &mut Ctx) {
    let toy_clip = || {
        gen_synthetic(&ClipSpec::new(
            Pattern::FourierTexture { waves: 5 },
            Motion::Translation { dx: 1.8, dy: -1.0 },
            2,
            10,
            10,
            4,
            95,
        ))
    };

    ctx.check("fresh_models_reproduce_bicubic", |_| {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let model = Model::new(ModelConfig::toy(), &mut rng)?;
        let clip = toy_clip()?;
        let sr = super_resolve(&model, &clip)?;
        Ok(exactly(sr.max_abs_diff(&bicubic_up(&clip)?)))
    });

    ctx.check("matched_targets_floor_the_loss", |_| {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let model = Model::new(ModelConfig::toy(), &mut rng)?;
        let mut clip = toy_clip()?;
        clip.hr = bicubic_up(&clip)?;
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let loss = clip_loss(&mut tape, &nodes, &clip)?;
        Ok(within((tape.value(loss).item() - CHARBONNIER_EPS).abs(), 1e-18))
    });

    ctx.check("cosine_schedule_hits_its_endpoints", |_| {
        let start = (cosine_lr(1e-3, 0, 100) - 1e-3).abs();
        let end = cosine_lr(1e-3, 99, 100);
        Ok(within(start.max(end), 1e-9))
    });

    ctx.check("config_entries_round_trip", |_| {
        let mut cfg = ModelConfig::full();
        cfg.set("align", "false")?;
        cfg.set("order", "spatial_first")?;
        let mut rebuilt = ModelConfig::toy();
        for (k, v) in cfg.entries() {
            rebuilt.set(k, &v)?;
        }
        Ok(claim(cfg == rebuilt, "full preset + 2 overrides".into()))
    });
}
