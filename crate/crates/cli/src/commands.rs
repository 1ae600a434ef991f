//! The five subcommands. Each builds a [`Table`]; writing it is the caller's job.

use rayon::prelude::*;
use stabcode::lti::{ClosedLoopSystem, LoopMetrics, LtiError};
use stabcode::mdc::{sigma2_profile, sumrate_approx, LatticeParams};
use stabcode::sim::{
    measure_distortion_table, open_loop_rates, run, sweep, theory_sigma_e2, Coder, SimCode, SimulationConfig,
};
use stabcode::stability::{
    avg_variance_test, build_mjls, critical_loss_mss, lemma1_variance_bound, lemma2_sumrate_lb,
    lemma3_efficiency, lemma4_performance, lemma5_variance_bound, mss_spectral_test, practical_efficiency,
    s_plus_one_norm, Construction, ErasureDistribution, StabilizingCodeSpec, TotalLossVariance,
};

use crate::config::{assignment, CodeConfig, Config};
use crate::table::{Cell, Table};
use crate::CliError;

fn core(e: impl std::fmt::Display) -> CliError {
    CliError::Core(e.to_string())
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn construction_name(c: Construction) -> &'static str {
    match c {
        Construction::Independent => "independent",
        Construction::Md => "md",
        Construction::Repetition => "repetition",
    }
}

/// The loop scaled so that the quantizer input has the configured variance
/// when every description of `code` arrives. `None` when even full reception
/// leaves too much noise for that variance.
fn calibrate(cfg: &Config, code: &SimCode) -> Result<Option<ClosedLoopSystem>, CliError> {
    match cfg.loop_.system()?.calibrated(cfg.loop_.sigma_v2, code.design_noise()) {
        Ok(sys) => Ok(Some(sys)),
        Err(LtiError::Unreachable { .. }) => Ok(None),
        Err(e @ LtiError::LoopUnstable(_)) => Err(CliError::Infeasible(e.to_string())),
        Err(e) => Err(core(e)),
    }
}

pub fn cmd_assign(cfg: &Config) -> Result<Table, CliError> {
    let a = &cfg.assign;
    let ia = assignment(a.r, a.k, a.table)?;
    let mut header = vec!["b".to_string()];
    header.extend((1..=a.k).map(|j| format!("a{j}")));
    header.extend(["row_cost".to_string(), "total_cost".to_string()]);
    let mut t = Table { header, rows: Vec::new() };
    let total = ia.cost();
    let kf = a.k as f64;
    for (b, tuple) in &ia.table {
        let mut row: Vec<Cell> = vec![(*b).into()];
        row.extend(tuple.iter().map(|x| Cell::from(*x)));
        row.push((stabcode::mdc::scaled_cost(*b, tuple) as f64 / kf).into());
        row.push(total.into());
        t.push(row);
    }
    Ok(t)
}

/// Side-distortion profile of the design target at `Δ = √12`, so that entry
/// `ℓ` is the multiplier of `Δ²/12`.
fn unit_profile(cfg: &Config) -> Result<(Vec<f64>, Option<LatticeParams>), CliError> {
    let d = &cfg.design;
    if d.k == 0 || d.k_prime == 0 || d.k_prime > d.k {
        return Err(CliError::Config(format!("need 1 ≤ k_prime ≤ k, got k={} k_prime={}", d.k, d.k_prime)));
    }
    let unit = 12f64.sqrt();
    let v = cfg.loop_.sigma_v2;
    match d.construction {
        Construction::Independent => {
            let s = StabilizingCodeSpec::independent(d.k, d.k_prime, 1.0, v).map_err(core)?;
            Ok((s.sigma2.sigma2, None))
        }
        Construction::Repetition => {
            if d.k_prime != 1 {
                return Err(CliError::Config("repetition codes have k_prime = 1".into()));
            }
            let s = StabilizingCodeSpec::repetition(d.k, 1.0, v).map_err(core)?;
            Ok((s.sigma2.sigma2, None))
        }
        Construction::Md => {
            let r = d.r.ok_or_else(|| CliError::Config("md designs need r".into()))?;
            let params = LatticeParams::new(unit, r, d.k).map_err(|e| CliError::Config(e.to_string()))?;
            let p = sigma2_profile(&params, v, None).map_err(|e| CliError::Config(e.to_string()))?;
            Ok((p.sigma2, Some(params)))
        }
    }
}

/// Key/value design report. A checked step that violates the stability
/// margin is an [`CliError::Infeasible`].
pub fn cmd_design(cfg: &Config) -> Result<Table, CliError> {
    let d = &cfg.design;
    let sigma_v2 = cfg.loop_.sigma_v2;
    let base = cfg.loop_.system()?;
    let m0 = base.metrics().map_err(|e| match e {
        LtiError::LoopUnstable(_) => CliError::Infeasible(e.to_string()),
        e => core(e),
    })?;
    let (mult, lattice) = unit_profile(cfg)?;
    let limit = if m0.snorm > 0.0 { sigma_v2 / m0.snorm } else { f64::INFINITY };
    let allowed = (1.0 - d.margin) * limit;
    let c = mult[d.k_prime];
    let delta_max = (12.0 * allowed / c).sqrt();
    let (delta, checked) = match d.delta {
        Some(x) => (x, true),
        None => (delta_max, false),
    };
    let sigma2_kp = c * delta * delta / 12.0;
    let accepted = sigma2_kp <= allowed;
    if checked && !accepted {
        return Err(CliError::Infeasible(format!(
            "delta = {delta} gives sigma2(k') = {sigma2_kp:.6}, above the admissible {allowed:.6} \
             (largest admissible delta {delta_max:.6})"
        )));
    }
    if !delta.is_finite() {
        return Err(CliError::Infeasible("the loop has zero sensitivity norm; any step is admissible".into()));
    }
    let noise_all = mult[d.k] * delta * delta / 12.0;
    let sys = base.calibrated(sigma_v2, noise_all).map_err(|e| CliError::Infeasible(e.to_string()))?;
    let m = sys.metrics().map_err(core)?;
    let delta_s = lattice.map_or(delta, |p| p.r as f64 * delta);
    let predicted = sumrate_approx(d.k, sigma_v2, delta_s);
    let lemma1 = lemma1_variance_bound(&m, d.k_prime).map_err(core)?;

    let mut t = Table::new(&["quantity", "value"]);
    let mut kv = |k: &str, v: Cell| t.push(vec![k.into(), v]);
    kv("construction", construction_name(d.construction).into());
    kv("k", d.k.into());
    kv("k_prime", d.k_prime.into());
    kv("r", d.r.filter(|_| lattice.is_some()).map(|r| r as i64).into());
    kv("sigma_v2", sigma_v2.into());
    kv("snorm", m.snorm.into());
    kv("min_snr", m.snorm.into());
    kv("min_rate", m.min_rate.into());
    kv("noise_limit", limit.into());
    kv("lemma1_bound", lemma1.into());
    kv("lemma5_bound", lemma5_variance_bound(&m, d.k, d.k_prime, 0.0).map_err(core)?.into());
    kv("lemma2_sumrate_lb", lemma2_sumrate_lb(d.k, d.k_prime, m.snorm).into());
    kv("lemma3_eta", lemma3_efficiency(d.k, d.k_prime, m.snorm).into());
    kv("margin", d.margin.into());
    kv("delta", delta.into());
    kv("delta_max", delta_max.into());
    kv("delta_s", delta_s.into());
    kv("sigma2_k_prime", sigma2_kp.into());
    kv("snr_k_prime", (sigma_v2 / sigma2_kp).into());
    kv("sigma2_k", noise_all.into());
    kv("beta", sys.beta.into());
    kv("sigma_e2_all_received", m.sigma_e2.into());
    kv("predicted_sumrate", predicted.bits.into());
    kv("predicted_sumrate_valid", predicted.valid.into());
    kv("eta", practical_efficiency(sigma_v2, delta, predicted.bits).into());
    kv("accepted", accepted.into());
    Ok(t)
}

struct CodeSetup {
    cfg: CodeConfig,
    code: SimCode,
    spec: StabilizingCodeSpec,
    /// Calibrated loop, if the target variance is reachable.
    sys: Option<ClosedLoopSystem>,
    metrics: Option<LoopMetrics>,
}

fn setup(cfg: &Config, c: &CodeConfig) -> Result<CodeSetup, CliError> {
    let code = c.sim_code()?;
    let spec = code.spec(c.k_prime, cfg.loop_.sigma_v2).map_err(core)?;
    let sys = calibrate(cfg, &code)?;
    let metrics = sys.as_ref().map(|s| s.metrics()).transpose().map_err(core)?;
    Ok(CodeSetup { cfg: c.clone(), code, spec, sys, metrics })
}

pub fn cmd_stability(cfg: &Config) -> Result<Table, CliError> {
    let st = &cfg.stability;
    let mut t = Table::new(&[
        "code",
        "construction",
        "k",
        "k_prime",
        "rho",
        "p_loss",
        "snorm",
        "lemma1_bound",
        "lemma5_bound",
        "lemma2_sumrate_lb",
        "lemma2_splus_lb",
        "lemma3_eta",
        "lemma4_sigma_e2",
        "avg_lhs",
        "avg_rhs",
        "avg_margin",
        "avg_stable",
        "avg_critical_p",
        "avg_critical_p_input_variance",
        "avg_critical_p_zero",
        "rho_a",
        "mss_stable",
        "mss_critical_p",
    ]);
    let base = cfg.loop_.system()?;
    let base_metrics = base.metrics().map_err(|e| CliError::Infeasible(e.to_string()))?;
    for c in cfg.select(&st.codes) {
        let s = setup(cfg, c)?;
        let sys = s.sys.clone().unwrap_or_else(|| base.clone());
        // The average-variance test only needs the norm and the target variance.
        let mut mref = s.metrics.clone().unwrap_or_else(|| base_metrics.clone());
        mref.sigma_v2 = cfg.loop_.sigma_v2;
        let (k, kp) = (s.spec.k, s.spec.k_prime);
        let lemma1 = s.metrics.as_ref().and_then(|m| lemma1_variance_bound(m, kp).ok());
        let lemma5 = s.metrics.as_ref().and_then(|m| lemma5_variance_bound(m, k, kp, s.spec.rho).ok());
        let lemma4 = s.metrics.as_ref().and_then(|m| lemma4_performance(m, kp, k).ok());
        let splus = s_plus_one_norm(&sys).map_err(core)?;
        let real = sys.realization();
        let critical = |conv| {
            let d = ErasureDistribution::new(0.0, k).expect("valid probability");
            avg_variance_test(&s.spec, &d, &mref, conv).critical_p
        };
        let crit_cfg = critical(st.total_loss);
        let crit_iv = critical(TotalLossVariance::InputVariance);
        let crit_zero = critical(TotalLossVariance::Zero);
        let mss_crit = critical_loss_mss(&real, &s.spec, sys.beta, st.decoder_on_empty).map_err(core)?;
        let rows: Vec<Result<Vec<Cell>, CliError>> = st
            .grid
            .0
            .par_iter()
            .map(|&p| {
                let dist = ErasureDistribution::new(p, k).map_err(core)?;
                let avg = avg_variance_test(&s.spec, &dist, &mref, st.total_loss);
                let model = build_mjls(&real, &s.spec, &dist, sys.beta, sys.sigma_d2, st.decoder_on_empty)
                    .map_err(core)?;
                let mss = mss_spectral_test(&model);
                Ok(vec![
                    s.cfg.name.as_str().into(),
                    construction_name(s.spec.construction).into(),
                    k.into(),
                    kp.into(),
                    s.spec.rho.into(),
                    p.into(),
                    mref.snorm.into(),
                    lemma1.into(),
                    lemma5.into(),
                    lemma2_sumrate_lb(k, kp, mref.snorm).into(),
                    lemma2_sumrate_lb(k, kp, splus).into(),
                    lemma3_efficiency(k, kp, mref.snorm).into(),
                    lemma4.into(),
                    avg.lhs.into(),
                    avg.rhs.into(),
                    avg.margin.into(),
                    avg.stable.into(),
                    crit_cfg.into(),
                    crit_iv.into(),
                    crit_zero.into(),
                    mss.rho.into(),
                    mss.stable.into(),
                    mss_crit.into(),
                ])
            })
            .collect();
        for r in rows {
            t.push(r?);
        }
    }
    Ok(t)
}

/// Long-format simulation table: one row per code and loss probability.
pub fn cmd_simulate(cfg: &Config) -> Result<Table, CliError> {
    let sc = &cfg.simulate;
    let setups: Vec<CodeSetup> = cfg.select(&sc.codes).into_iter().map(|c| setup(cfg, c)).collect::<Result<_, _>>()?;
    let kmax = setups.iter().map(|s| s.spec.k).max().unwrap_or(0);
    let mut header: Vec<String> = [
        "code",
        "construction",
        "k",
        "k_prime",
        "p_loss",
        "sigma_e2",
        "sigma_e2_db",
        "theory_db",
        "sigma_v2",
        "sumrate",
        "sumrate_entropy",
    ]
    .map(String::from)
    .to_vec();
    header.extend((1..=kmax).map(|j| format!("rate_{j}")));
    header.push("diverged".into());
    let mut t = Table { header, rows: Vec::new() };
    for s in setups {
        let sys = s.sys.ok_or_else(|| {
            CliError::Infeasible(format!(
                "code {}: sigma_v2 = {} is unreachable with every description received",
                s.cfg.name, cfg.loop_.sigma_v2
            ))
        })?;
        let m = s.metrics.expect("calibrated loops have metrics");
        let mut base = SimulationConfig::new(sys, s.code.clone(), 0.0, sc.horizon, cfg.seed);
        base.warmup = sc.warmup;
        base.coder = sc.coder;
        base.decoder_on_empty = sc.decoder_on_empty;
        base.empty_value = sc.empty_value;
        let results = sweep(&base, &sc.grid.0).map_err(core)?;
        for r in results {
            let theory = theory_sigma_e2(&m, &s.spec, r.p_loss, sc.total_loss);
            let mut row: Vec<Cell> = vec![
                s.cfg.name.as_str().into(),
                construction_name(s.spec.construction).into(),
                s.spec.k.into(),
                s.spec.k_prime.into(),
                r.p_loss.into(),
                r.sigma_e2.into(),
                r.sigma_e2_db.into(),
                db(theory).into(),
                r.sigma_v2.into(),
                r.sumrate.into(),
                r.rates.entropy.iter().sum::<f64>().into(),
            ];
            for j in 0..kmax {
                row.push(r.per_description_rate.get(j).copied().into());
            }
            row.push(r.diverged.into());
            t.push(row);
        }
    }
    Ok(t)
}

/// True when the table has rows and every one of them diverged.
pub fn all_diverged(t: &Table) -> bool {
    let Some(col) = t.column("diverged") else { return false };
    !t.rows.is_empty() && t.rows.iter().all(|r| r[col] == Cell::Bool(true))
}

pub fn cmd_tables(cfg: &Config, which: &str) -> Result<Table, CliError> {
    match which {
        "distortion" => distortion_table(cfg),
        "efficiency" => efficiency_table(cfg),
        other => Err(CliError::Config(format!("unknown table {other:?}; expected distortion or efficiency"))),
    }
}

fn distortion_table(cfg: &Config) -> Result<Table, CliError> {
    let tc = &cfg.tables;
    let ia = assignment(tc.distortion_r, tc.distortion_k, tc.distortion_table)?;
    let rows = measure_distortion_table(&ia, &tc.distortion_deltas, tc.distortion_samples, cfg.seed).map_err(core)?;
    let k = tc.distortion_k;
    let mut header = vec!["delta".to_string()];
    header.extend((1..=k).map(|l| format!("d{l}_db")));
    header.extend((1..=k).map(|l| format!("model{l}_db")));
    header.extend((1..=k).map(|l| format!("gap{l}_db")));
    let mut t = Table { header, rows: Vec::new() };
    for r in rows {
        let mut row: Vec<Cell> = vec![r.delta.into()];
        row.extend(r.measured_db.iter().map(|x| Cell::from(*x)));
        row.extend(r.theory_db.iter().map(|x| Cell::from(*x)));
        row.extend(r.measured_db.iter().zip(&r.theory_db).map(|(a, b)| Cell::from(a - b)));
        t.push(row);
    }
    Ok(t)
}

/// Sum-rates at `p = 0` and the resulting efficiencies. Codes whose loop
/// cannot be calibrated are measured on Gaussian input of the target variance.
fn efficiency_table(cfg: &Config) -> Result<Table, CliError> {
    let tc = &cfg.tables;
    let mut t = Table::new(&[
        "code",
        "construction",
        "k",
        "k_prime",
        "delta",
        "r",
        "sigma_v2",
        "sumrate",
        "sumrate_entropy",
        "theory_sumrate",
        "eta",
        "source",
    ]);
    for c in cfg.select(&tc.efficiency_codes) {
        let s = setup(cfg, c)?;
        let (sigma_v2, rates, source) = match s.sys {
            Some(sys) => {
                let mut sc = SimulationConfig::new(sys, s.code.clone(), 0.0, tc.efficiency_horizon, cfg.seed);
                sc.coder = Coder::HuffmanStream;
                let r = run(&sc).map_err(core)?;
                (r.sigma_v2, r.rates, "loop")
            }
            None => {
                let v = cfg.loop_.sigma_v2;
                (v, open_loop_rates(&s.code, v, tc.efficiency_horizon, cfg.seed).map_err(core)?, "gaussian")
            }
        };
        let huffman: f64 = rates.huffman.iter().sum();
        let entropy: f64 = rates.entropy.iter().sum();
        let delta_s = match &s.code {
            SimCode::Md { assignment, delta } => assignment.r as f64 * delta,
            _ => c.delta,
        };
        let theory = sumrate_approx(s.spec.k, sigma_v2, delta_s);
        t.push(vec![
            c.name.as_str().into(),
            construction_name(c.kind).into(),
            s.spec.k.into(),
            s.spec.k_prime.into(),
            c.delta.into(),
            c.r.filter(|_| c.kind == Construction::Md).map(|r| r as i64).into(),
            sigma_v2.into(),
            huffman.into(),
            entropy.into(),
            Cell::from(theory.valid.then_some(theory.bits)),
            practical_efficiency(sigma_v2, c.delta, huffman).into(),
            source.into(),
        ]);
    }
    Ok(t)
}
