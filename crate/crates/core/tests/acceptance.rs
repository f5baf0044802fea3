//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vicurl_core::curriculum::{kept_count, select};
use vicurl_core::diagnostics::{
    direct_variance, monte_carlo_report, variance_sweep, GradientSampler, WeightConvention,
};
use vicurl_core::grpo::{surrogate_gradient, surrogate_loss, SurrogateConfig, TrajectoryGroup};
use vicurl_core::harness::run::{prepare, run_experiment_with_policy};
use vicurl_core::harness::{run_ablation, AblationConfig, ExperimentConfig, Method};
use vicurl_core::oracle::matrix::{matrix_specs, run_matrix, MatrixReport, MatrixTolerances, MATRIX_BETAS};
use vicurl_core::oracle::{exact_consistency, exact_variance_components, InstanceSpec, OracleInstance};
use vicurl_core::policy::PolicyParams;
use vicurl_core::rewards::{RewardMode, RewardVector};
use vicurl_core::tasks::{generate_dataset, TaskConfig};
use vicurl_core::SelectionRule;

type Outcome = (bool, String);
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn suite() -> ExperimentConfig {
    ExperimentConfig::from_path(&configs_dir().join("suite.toml")).expect("suite config")
}

fn unbiasedness(m: &MatrixReport) -> Outcome {
    let ok = m.unbiasedness_passed && m.elapsed_secs < 60.0;
    (
        ok,
        format!(
            "{} cases, max residual {:.2e} (<= 1e-9), matrix time {:.2}s (< 60s)",
            m.cases.len(),
            m.max_unbiasedness_residual,
            m.elapsed_secs
        ),
    )
}

/// Monte-Carlo instance for the stochastic estimators.
fn mc_instance() -> OracleInstance {
    let spec = InstanceSpec::new(3, 2, 4);
    OracleInstance::random(&spec, 11).expect("instance")
}

const MC_BETA: f64 = 0.5;

/// `(direct, decomposed)` Monte-Carlo estimates of `Var(ĝ_t)` from `draws`
/// group samples each.
fn mc_estimates(inst: &OracleInstance, draws: usize, seed: u64) -> (f64, f64) {
    let (_, masks, beta) = inst.curriculum_mask(MC_BETA).unwrap();
    let sampler = GradientSampler {
        theta: &inst.theta,
        theta_old: &inst.theta_old,
        reference: &inst.reference,
        cfg: &inst.cfg,
        reward_mode: inst.reward_mode,
        group_size: inst.group_size,
    };
    let prompts = &inst.dataset.prompts;
    let direct = direct_variance(&sampler, prompts, &masks, beta, draws, seed).unwrap();
    let repeats = draws / prompts.len();
    let report = monte_carlo_report(
        &sampler,
        prompts,
        &masks,
        WeightConvention::Population,
        repeats,
        0,
        seed,
    )
    .unwrap();
    (direct, report.total_decomposed)
}

fn identity(m: &MatrixReport) -> Outcome {
    let inst = mc_instance();
    let exact = exact_variance_components(&inst, MC_BETA)
        .unwrap()
        .report
        .total_direct
        .unwrap();
    let (direct, decomposed) = mc_estimates(&inst, 20_000, 7);
    let again = mc_estimates(&inst, 20_000, 7);
    let rel_direct = (direct - exact).abs() / exact;
    let rel_decomposed = (decomposed - exact).abs() / exact;
    let reproducible = again == (direct, decomposed);
    let ok = m.identity_passed && rel_direct <= 0.05 && rel_decomposed <= 0.05 && reproducible;
    (
        ok,
        format!(
            "exact max residual {:.2e} (<= 1e-9); MC at 20000: direct {:.2}%, decomposed {:.2}% (<= 5%), reproducible {}",
            m.max_identity_residual,
            100.0 * rel_direct,
            100.0 * rel_decomposed,
            reproducible
        ),
    )
}

fn consistency(m: &MatrixReport) -> Outcome {
    let specs = matrix_specs();
    let mut min_slack = f64::INFINITY;
    let mut failures = 0;
    let mut zero_gap = true;
    for i in 0..100u64 {
        let (mut spec, _) = specs[i as usize % specs.len()];
        spec.perturbation = 0.5 + (i % 4) as f64;
        let inst = OracleInstance::random(&spec, 1_000 + i).unwrap();
        let beta = MATRIX_BETAS[i as usize % MATRIX_BETAS.len()];
        let c = exact_consistency(&inst, beta).unwrap();
        min_slack = min_slack.min(c.slack);
        if c.slack < -m.tolerances.bound_rounding * c.bound.max(1.0) {
            failures += 1;
        }
        let full = exact_consistency(&inst, 1.0).unwrap();
        zero_gap &= full.gap == 0.0;
    }
    let ok = m.consistency_passed && m.zero_gap_at_full_retention && failures == 0 && zero_gap;
    (
        ok,
        format!(
            "matrix min slack {:.3e}; 100 perturbations: {failures} violations, min slack {min_slack:.3e}; gap 0 at beta=1: {}",
            m.min_consistency_slack,
            m.zero_gap_at_full_retention && zero_gap
        ),
    )
}

fn confidence_bound(m: &MatrixReport) -> Outcome {
    let violations = m
        .cases
        .iter()
        .filter(|c| c.envelope_slack < -m.tolerances.bound_rounding * c.envelope_bound.max(1.0))
        .count();
    (
        m.envelope_passed,
        format!(
            "{} cases, {violations} violations, min slack {:.3e}",
            m.cases.len(),
            m.min_envelope_slack
        ),
    )
}

/// A random group whose ratios all sit at least `margin` away from the clip
/// kinks, or `None` if the draw lands too close.
fn random_fd_case(rng: &mut ChaCha8Rng) -> Option<(PolicyParams, PolicyParams, TrajectoryGroup, SurrogateConfig)> {
    let vocab = rng.random_range(2..=4);
    let max_len = rng.random_range(1..=3);
    let group_size = rng.random_range(2..=5);
    let task = TaskConfig {
        vocab_size: vocab,
        answer_alphabet: vocab,
        answer_len: 1,
        context_len: 1,
        max_len,
        counts: vec![2],
    };
    let dataset = generate_dataset(&task, rng.random()).unwrap();
    let shape = dataset.policy_shape();
    let mut draw = |scale: f64| {
        (0..shape.param_count())
            .map(|_| rng.random_range(-scale..scale))
            .collect::<Vec<_>>()
    };
    let old = draw(1.5);
    let delta = draw(0.4);
    let reference = PolicyParams::from_logits(shape, draw(1.5)).unwrap();
    let theta = PolicyParams::from_logits(shape, old.iter().zip(&delta).map(|(a, b)| a + b).collect()).unwrap();
    let theta_old = PolicyParams::from_logits(shape, old).unwrap();
    let prompt = dataset.prompts[0].clone();
    let trajs: Vec<_> = (0..group_size)
        .map(|_| theta_old.sample_trajectory(prompt.id, 1.0, rng).unwrap())
        .collect();
    let rewards = RewardVector {
        values: (0..group_size).map(|_| rng.random_range(0.0..1.0)).collect(),
        mode: RewardMode::Oracle,
    };
    let cfg = SurrogateConfig {
        clip_epsilon: 0.2,
        kl_coefficient: rng.random_range(0.0..0.5),
        advantage_epsilon: 1e-6,
    };
    let group = TrajectoryGroup::new(prompt, trajs, rewards, cfg.advantage_epsilon, vocab).unwrap();
    let margin = 1e-3;
    for t in &group.trajectories {
        for (step, &lp_old) in t.behavior_logprobs.iter().enumerate() {
            let rho = (theta.token_log_prob(&t.context(step), t.tokens[step]).unwrap() - lp_old).exp();
            let eps = cfg.clip_epsilon;
            if (rho - (1.0 - eps)).abs() < margin || (rho - (1.0 + eps)).abs() < margin {
                return None;
            }
        }
    }
    Some((theta, reference, group, cfg))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut rejected = 0;
    while checked < 100 {
        let Some((theta, reference, group, cfg)) = random_fd_case(&mut rng) else {
            rejected += 1;
            continue;
        };
        let analytic = surrogate_gradient(&theta, &reference, &group, &cfg).unwrap();
        let mut err = 0.0;
        for i in 0..theta.dim() {
            let mut plus = theta.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = theta.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (surrogate_loss(&plus, &reference, &group, &cfg).unwrap()
                - surrogate_loss(&minus, &reference, &group, &cfg).unwrap())
                / (2.0 * h);
            err += (fd - analytic[i]).powi(2);
        }
        worst = worst.max(err.sqrt() / analytic.norm().max(1e-8));
        checked += 1;
    }
    (
        worst <= 1e-5,
        format!("100 configurations ({rejected} near-kink draws skipped), max relative error {worst:.2e} (<= 1e-5)"),
    )
}

fn curriculum_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = Vec::new();
    for trial in 0..1_000 {
        let b: usize = rng.random_range(1..=64);
        let beta: f64 = if rng.random_bool(0.1) {
            1.0
        } else {
            rng.random_range(1e-3..1.0)
        };
        // Coarse grids make ties common.
        let levels: f64 = [3.0, 10.0, 1e6][rng.random_range(0..3)];
        let conf: Vec<f64> = (0..b)
            .map(|_| (rng.random_range(0.0..1.0) * levels).round() / levels)
            .collect();
        let sel = select(&conf, beta, SelectionRule::TopK).unwrap();
        let k = ((beta * b as f64).round() as usize).max(1).min(b);
        // Sort oracle: prompt i is kept iff fewer than k prompts outrank it.
        let oracle: Vec<bool> = (0..b)
            .map(|i| {
                (0..b)
                    .filter(|&j| conf[j] > conf[i] || (conf[j] == conf[i] && j < i))
                    .count()
                    < k
            })
            .collect();
        let weight_sum: f64 = sel.weights().iter().sum();
        let ok = sel.kept == k
            && kept_count(b, beta) == k
            && sel.masks.iter().filter(|m| **m).count() == k
            && sel.beta_hat == k as f64 / b as f64
            && sel.masks == oracle
            && (weight_sum - b as f64).abs() <= 1e-12 * b as f64;
        if !ok {
            failures.push(trial);
        }
    }
    (
        failures.is_empty(),
        format!("1000 triples, {} mismatches {:?}", failures.len(), failures),
    )
}

fn degeneracy() -> Outcome {
    let start = Instant::now();
    let mut base = suite();
    base.total_steps = 10;
    base.eval.every = 5;
    let mut curl = base.clone();
    curl.method = Method::ViCurl;
    curl.curriculum.beta_start = 1.0;
    let mut plain = base.clone();
    plain.method = Method::NoCurriculum;
    let (a, pa) = run_experiment_with_policy(&curl).unwrap();
    let (b, pb) = run_experiment_with_policy(&plain).unwrap();
    let bitwise = pa.to_bytes() == pb.to_bytes();
    let rows = a.rows == b.rows;
    let secs = start.elapsed().as_secs_f64();
    (
        bitwise && rows && secs < 30.0,
        format!("final logits bitwise equal {bitwise}, rows equal {rows}, {secs:.2}s (< 30s)"),
    )
}

fn variance_ratios() -> Outcome {
    let start = Instant::now();
    let base = suite();
    let seeds = 0..5u64;
    let mut low = (0.0, 0.0);
    let mut full_ok = true;
    let mut per_seed = Vec::new();
    for s in seeds.clone() {
        let mut cfg = base.with_seed(s);
        cfg.dataset_seed = Some(s);
        let setup = prepare(&cfg).unwrap();
        let r = &setup.reference;
        let sampler = GradientSampler {
            theta: r,
            theta_old: r,
            reference: r,
            cfg: &cfg.surrogate,
            reward_mode: cfg.reward_mode,
            group_size: cfg.group_size,
        };
        let pts = variance_sweep(&sampler, &setup.dataset.prompts, &[0.2, 1.0], 32, s).unwrap();
        let (l, f) = (&pts[0].report, &pts[1].report);
        low.0 += l.ratio_sigma / 5.0;
        low.1 += l.ratio_vprob / 5.0;
        full_ok &= [f.ratio_sigma, f.ratio_vprob].iter().all(|v| (0.98..=1.02).contains(v));
        per_seed.push(format!("{:.3}/{:.3}", l.ratio_sigma, l.ratio_vprob));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = low.0 < 1.0 && low.1 < 1.0 && full_ok && secs < 600.0;
    (
        ok,
        format!(
            "beta=0.2 mean ratios sigma {:.3}, vprob {:.3} (< 1; per seed {}); beta=1 within [0.98, 1.02]: {full_ok}; {secs:.1}s",
            low.0,
            low.1,
            per_seed.join(" ")
        ),
    )
}

fn stability() -> Outcome {
    let ablation = AblationConfig::from_path(&configs_dir().join("ablation.toml")).expect("ablation config");
    let summary = run_ablation(&ablation.cells(), &ablation.seeds).unwrap();
    let csv = summary.to_csv();
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ablation.csv");
    std::fs::write(&out, &csv).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for mode in [RewardMode::Entropy, RewardMode::MajorityVote] {
        let curl = summary.cell(mode, Method::ViCurl).unwrap();
        let plain = summary.cell(mode, Method::NoCurriculum).unwrap();
        let (mc, mp) = (curl.pass_at_1_stats().0, plain.pass_at_1_stats().0);
        ok &= mc >= mp;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
        detail.push(format!(
            "{mode}: vi_curl {mc:.4} [{}] vs no_curriculum {mp:.4} [{}]",
            fmt(&curl.pass_at_1),
            fmt(&plain.pass_at_1)
        ));
    }
    println!("{}", csv.trim_end());
    (ok, format!("{}; csv at {}", detail.join("; "), out.display()))
}

/// Root-mean-square error against the exact variance over `replicates`
/// independent estimates at `draws` samples each.
fn rms_errors(inst: &OracleInstance, exact: f64, draws: usize, replicates: u64, seed: u64) -> (f64, f64) {
    let mut direct = 0.0;
    let mut decomposed = 0.0;
    for r in 0..replicates {
        let (d, s) = mc_estimates(inst, draws, seed.wrapping_mul(1_000_003).wrapping_add(r));
        direct += (d - exact).powi(2);
        decomposed += (s - exact).powi(2);
    }
    let n = replicates as f64;
    ((direct / n).sqrt(), (decomposed / n).sqrt())
}

fn convergence() -> Outcome {
    let inst = mc_instance();
    let exact = exact_variance_components(&inst, MC_BETA)
        .unwrap()
        .report
        .total_direct
        .unwrap();
    let (draws, replicates) = (2_000, 200);
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in [1u64, 2, 3] {
        let small = rms_errors(&inst, exact, draws, replicates, seed);
        let large = rms_errors(&inst, exact, 4 * draws, replicates, seed + 100);
        let ratios = (small.0 / large.0, small.1 / large.1);
        ok &= [ratios.0, ratios.1].iter().all(|r| (1.5..=3.0).contains(r));
        detail.push(format!(
            "seed {seed}: direct {:.2}, decomposed {:.2}",
            ratios.0, ratios.1
        ));
    }
    (
        ok,
        format!(
            "RMS error ratio N={draws} vs 4N over {replicates} replicates in [1.5, 3]: {}",
            detail.join("; ")
        ),
    )
}

fn main() -> ExitCode {
    let matrix = run_matrix(&MatrixTolerances::default()).expect("oracle matrix");
    let criteria: Vec<Criterion<'_>> = vec![
        ("exact unbiasedness", Box::new(|| unbiasedness(&matrix))),
        ("variance identity", Box::new(|| identity(&matrix))),
        ("consistency bound", Box::new(|| consistency(&matrix))),
        ("confidence variance bound", Box::new(|| confidence_bound(&matrix))),
        ("gradient correctness", Box::new(gradient_check)),
        ("curriculum exactness", Box::new(curriculum_exactness)),
        ("degeneracy at full retention", Box::new(degeneracy)),
        ("variance-ratio property", Box::new(variance_ratios)),
        ("verifier-free stability", Box::new(stability)),
        ("Monte-Carlo convergence", Box::new(convergence)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = run();
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<30} {} ({:.1}s) {detail}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
