//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use rand::Rng;
use tsdiff::denoisers::{perturb_epsilon, AnalyticDenoiser, GaussianMoments, Mixture, Mlp, MlpShape, PerturbationSpec};
use tsdiff::diagnostics::{
    coupling_matrix, heterogeneous_data, mse_by_step, sliced_wasserstein, variance_density, CouplingConfig, MseConfig,
    VarianceSource,
};
use tsdiff::rng::{Purpose, Streams};
use tsdiff::samplers::{run_sampler, Method, SamplerConfig};
use tsdiff::schedule::{q_sample, select_time_grid, GridMode, NoiseSchedule};
use tsdiff::theory::{run_theorem_experiment, TheoremExperiment};
use tsdiff::timeshift::{intra_sample_variance, run_time_shift_sampler, select_shifted_timestep, ShiftConfig};
use tsdiff::training::{noised_batch, sample_mixture, Trainable};
use tsdiff::{verify, Result, SampleBatch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn c1(s: &NoiseSchedule) -> Result<Outcome> {
    let r = verify::equivalence(100, &[0, 1, 2], s)?;
    let bad: Vec<String> = r.cases.iter().filter(|c| !c.identical).map(|c| format!("{} seed {} {}", c.method, c.seed, c.variant)).collect();
    Ok(Outcome { pass: r.pass, detail: format!("{} cases, mismatches: [{}]", r.cases.len(), bad.join(", ")) })
}

fn c2(s: &NoiseSchedule) -> Result<Outcome> {
    let (n, d, mu) = (10_000, 16, 0.5);
    let streams = Streams::new(2);
    let mut x0 = SampleBatch::standard_normal(n, d, &mut streams.stream(Purpose::Data, 0));
    x0.as_mut_slice().iter_mut().for_each(|v| *v += mu);
    let mut pass = true;
    let mut worst = (0.0f64, 0.0f64);
    for (k, t) in [100, 500, 900].into_iter().enumerate() {
        let eps = SampleBatch::standard_normal(n, d, &mut streams.stream(Purpose::Sampling, k as u64));
        let xt = q_sample(&x0, t, &eps, s)?;
        let ab = s.alpha_bar(t);
        let (m_ref, v_ref) = (ab.sqrt() * mu, ab + 1.0 - ab);
        for j in 0..d {
            let col: Vec<f64> = xt.rows().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (n - 1) as f64;
            let z = (m - m_ref).abs() / (v / n as f64).sqrt();
            let rel = (v / v_ref - 1.0).abs();
            worst = (worst.0.max(z), worst.1.max(rel));
            pass &= z <= 3.0 && rel <= 0.05;
        }
    }
    Ok(Outcome { pass, detail: format!("worst mean deviation {:.2} SE, worst variance deviation {:.2}%", worst.0, 100.0 * worst.1) })
}

fn c3(s: &NoiseSchedule) -> Result<Outcome> {
    let r = run_theorem_experiment(&TheoremExperiment::default(), s)?;
    let cells: Vec<String> = r.cells.iter().map(|c| format!("t={} |e|={}: {:.3}", c.t, c.err_norm, c.agreement_rate)).collect();
    Ok(Outcome { pass: r.min_cell_rate >= 0.95, detail: format!("min cell {:.3}; {}", r.min_cell_rate, cells.join(", ")) })
}

fn c4(s: &NoiseSchedule) -> Result<Outcome> {
    let (d, window, trials) = (3072, 40, 1000);
    let mut rates = Vec::new();
    for (k, t) in [700usize, 800, 900].into_iter().enumerate() {
        let mut rng = Streams::new(4).stream(Purpose::Diagnostics, k as u64);
        let center = t - 1;
        let mut hits = 0;
        for _ in 0..trials {
            let target = (center as i64 + rng.random_range(-20i64..=20)) as usize;
            let scale = s.variance(target).sqrt();
            let mut x = SampleBatch::standard_normal(1, d, &mut rng).into_vec();
            x.iter_mut().for_each(|v| *v *= scale);
            let tau = select_shifted_timestep(intra_sample_variance(&x)?, center, window, s)?;
            hits += usize::from(tau.abs_diff(target) <= 2);
        }
        rates.push((t, hits as f64 / trials as f64));
    }
    let pass = rates.iter().all(|(_, r)| *r >= 0.9);
    let detail = rates.iter().map(|(t, r)| format!("t={t}: {r:.3}")).collect::<Vec<_>>().join(", ");
    Ok(Outcome { pass, detail })
}

fn swd(mix: &Mixture, method: Method, shift: bool, seed: u64, s: &NoiseSchedule) -> Result<f64> {
    let model = perturb_epsilon(AnalyticDenoiser::new(mix.clone(), s.clone()), PerturbationSpec::constant(s.len(), 0.05, seed))?;
    let cfg = SamplerConfig::new(method, select_time_grid(s, 10, GridMode::Uniform)?, 2000, seed);
    let (x, _) = if shift {
        run_time_shift_sampler(&cfg, &ShiftConfig::new(40, 300), &model, s)?
    } else {
        run_sampler(&cfg, &model, s)?
    };
    let reference = sample_mixture(mix, 2000, &mut Streams::new(seed).stream(Purpose::Data, 0));
    sliced_wasserstein(&x, &reference, 64, &mut Streams::new(seed).stream(Purpose::Diagnostics, 0))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c5(s: &NoiseSchedule) -> Result<Outcome> {
    let (d, var) = (16, 0.25);
    let single = Mixture::single(GaussianMoments::isotropic(vec![0.5; d], var))?;
    let gmm = Mixture::new(
        [(1.5, 1.5), (-1.5, 1.5), (1.5, -1.5), (-1.5, -1.5)]
            .iter()
            .map(|&(a, b)| {
                let mut mean = vec![0.0; d];
                mean[0] = a;
                mean[1] = b;
                GaussianMoments { mean, variance: vec![var; d], weight: 0.25 }
            })
            .collect(),
    )?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, mix) in [("gaussian", &single), ("gmm", &gmm)] {
        for method in [Method::Ddim, Method::Ddpm] {
            let mut base = Vec::new();
            let mut ts = Vec::new();
            for seed in 0..10 {
                base.push(swd(mix, method, false, seed, s)?);
                ts.push(swd(mix, method, true, seed, s)?);
            }
            let (b, t) = (median(base), median(ts));
            pass &= t <= b;
            parts.push(format!("{name} {method}: {b:.4} -> ts {t:.4}"));
        }
    }
    Ok(Outcome { pass, detail: parts.join(", ") })
}

fn c6(s: &NoiseSchedule) -> Result<Outcome> {
    let r = verify::solver_order(&[10, 20, 40, 80], 960, s)?;
    let parts: Vec<String> = r.curves.iter().map(|c| format!("{} slope {:.2}", c.method, c.slope)).collect();
    Ok(Outcome { pass: r.pass, detail: parts.join(", ") })
}

fn c7(s: &NoiseSchedule) -> Result<Outcome> {
    let streams = Streams::new(7);
    let mlp = Mlp::new(MlpShape::standard(2), &mut streams.stream(Purpose::Init, 0))?;
    let x0 = SampleBatch::standard_normal(16, 2, &mut streams.stream(Purpose::Data, 0));
    let (ts, eps, xt) = noised_batch(&x0, s, &mut streams.stream(Purpose::Training, 0))?;
    let (_, grad) = mlp.loss_and_grad(&xt, &ts, &eps)?;
    let mut rng = streams.stream(Purpose::Diagnostics, 0);
    let h = 1e-5;
    let (mut diff, mut norm_g, mut norm_fd) = (0.0, 0.0, 0.0);
    let checked = 2000.min(grad.len());
    for _ in 0..checked {
        let k = rng.random_range(0..grad.len());
        let mut p = mlp.clone();
        p.params_mut()[k] += h;
        let up = p.loss_and_grad(&xt, &ts, &eps)?.0;
        p.params_mut()[k] -= 2.0 * h;
        let down = p.loss_and_grad(&xt, &ts, &eps)?.0;
        let fd = (up - down) / (2.0 * h);
        diff += (fd - grad[k]).powi(2);
        norm_g += grad[k].powi(2);
        norm_fd += fd.powi(2);
    }
    let rel = diff.sqrt() / f64::max(norm_g.sqrt(), norm_fd.sqrt()).max(1e-300);
    Ok(Outcome { pass: rel < 1e-4, detail: format!("relative error {rel:.2e} over {checked} sampled parameters of {}", grad.len()) })
}

fn c8(s: &NoiseSchedule) -> Result<Outcome> {
    let big_t = s.len();
    let data = heterogeneous_data(1000, 256, 0.05, 1.0, &mut Streams::new(8).stream(Purpose::Data, 0))?;
    let dens = variance_density(&data, &[0, 9 * big_t / 10], VarianceSource::Forward, s, &mut Streams::new(8).stream(Purpose::Diagnostics, 0))?;
    let (w0, w9) = (dens.width(0).unwrap_or(f64::NAN), dens.width(9 * big_t / 10).unwrap_or(f64::NAN));
    let a = w9 < 0.5 * w0;

    let d = 2;
    let mix = Mixture::single(GaussianMoments::isotropic(vec![0.2; d], 0.25))?;
    let model = perturb_epsilon(AnalyticDenoiser::new(mix.clone(), s.clone()), PerturbationSpec::constant(big_t, 0.05, 1))?;
    let data = sample_mixture(&mix, 1000, &mut Streams::new(8).stream(Purpose::Data, 1));
    let grid = select_time_grid(s, 10, GridMode::Uniform)?;
    let report = coupling_matrix(&model, &data, &CouplingConfig::new(SamplerConfig::new(Method::Ddim, grid, 1, 0)), s)?;
    let beats = report.beats_diagonal().iter().filter(|c| c.t >= big_t / 2).count();
    let t_low = report.steps().into_iter().min().unwrap_or(0);
    let spread = report.relative_spread(t_low).unwrap_or(f64::NAN);
    let b = beats > 0 && spread <= 0.01;

    let grid = select_time_grid(s, 50, GridMode::Uniform)?;
    let curve = mse_by_step(&model, &data, &MseConfig::new(SamplerConfig::new(Method::Ddim, grid, 1, 0), s), s)?;
    let (term, min) = (curve.terminal().unwrap_or(f64::NAN), curve.interior_min().unwrap_or(f64::NAN));
    let c = term > min;

    let mark = |p: bool| if p { "ok" } else { "fail" };
    Ok(Outcome {
        pass: a && b && c,
        detail: format!(
            "(a) {} width t=0 {w0:.4} vs t=0.9T {w9:.4}; (b) {} {beats} cells beat diagonal for t >= T/2, spread at t={t_low} {:.2}%; (c) {} terminal {term:.4} vs interior min {min:.4}",
            mark(a),
            mark(b),
            100.0 * spread,
            mark(c)
        ),
    })
}

fn c9(s: &NoiseSchedule) -> Result<Outcome> {
    let r = verify::window_sanity(s)?;
    let bad: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    Ok(Outcome { pass: r.pass, detail: format!("{} checks, failing: [{}]", r.checks.len(), bad.join(", ")) })
}

type Criterion = fn(&NoiseSchedule) -> Result<Outcome>;

fn main() {
    let schedule = NoiseSchedule::default();
    let criteria: [(&str, &str, Criterion, u64); 9] = [
        ("1", "degenerate equivalence", c1, 60),
        ("2", "forward-kernel statistics", c2, 10),
        ("3", "optimal-shift agreement with the KL oracle", c3, 300),
        ("4", "shift recovery", c4, 60),
        ("5", "exposure-bias reduction", c5, 300),
        ("6", "solver order", c6, 120),
        ("7", "MLP gradient check", c7, 30),
        ("8", "diagnostics shape", c8, 300),
        ("9", "window-bound sanity", c9, 10),
    ];
    let mut failures = 0;
    for (id, name, run, budget) in criteria {
        let start = Instant::now();
        let result = run(&schedule);
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && in_budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id} ({name}): {detail} [{:.1}s of {budget}s]", elapsed.as_secs_f64());
    }
    if failures > 0 {
        println!("{failures} of 9 criteria failed");
        std::process::exit(1);
    }
}
