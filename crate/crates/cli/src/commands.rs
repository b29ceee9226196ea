use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use scalemix::cgf::DependenceSpec;
use scalemix::conditional::{conditional_simulate, ConditioningSet, SaddlepointInterpolator};
use scalemix::covmodel::SiteSet;
use scalemix::diagnostics::{
    bootstrap_band, congregation_entropy, exceedance_sums, quantile_table, threshold_counts, Band,
};
use scalemix::estimate::{estimate_all, EstimationConfig, EstimationResult};
use scalemix::io::{
    read_numeric_table, read_samples_binary, read_samples_csv, read_sites, write_binary_to, write_labeled_table,
    write_mixture, write_samples_csv, write_sites, write_table, CsvHeader,
};
use scalemix::mixture::{moments_to_cumulants, GammaMixture};
use scalemix::simulate::{grid_spec_to_sites, sample_field, sample_gaussian, GridSpec, SampleMatrix};
use scalemix::study;

use crate::config::{self, missing, FieldChoice, LoadedConfig, OutputFormat, ReproduceConfig, Statistic};
use crate::{Cli, CliError, Command};

/// 64×64 sites.
pub const DEFAULT_CAP: usize = 4096;

struct Ctx {
    cfg: LoadedConfig,
    seed: u64,
    out: PathBuf,
    cap: usize,
}

impl Ctx {
    fn header(&self) -> CsvHeader {
        CsvHeader::new(&self.cfg.hash, self.seed).with("experiment", self.cfg.config.experiment.clone())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn sites(&self) -> Result<(SiteSet, Vec<Vec<f64>>), CliError> {
        let s = self.cfg.config.sites.as_ref().ok_or_else(|| missing("sites.grid"))?;
        match (&s.grid, &s.file) {
            (Some(g), None) => {
                let grid = GridSpec::new(g.nx, g.ny, g.spacing);
                Ok((grid_spec_to_sites(&grid, self.cap)?, Vec::new()))
            }
            (None, Some(f)) => {
                let (sites, cov) = read_sites(&self.cfg.resolve(f), false)?;
                if sites.len() > self.cap {
                    return Err(scalemix::Error::Size(format!("{} sites, above the cap of {}", sites.len(), self.cap)).into());
                }
                Ok((sites, cov))
            }
            (Some(_), Some(_)) => Err(CliError::Usage("give either `sites.grid` or `sites.file`, not both".into())),
            (None, None) => Err(missing("sites.grid")),
        }
    }

    /// Model at the configured sites; a Gaussian mixture config gives the
    /// degenerate scaling variable.
    fn spec(&self) -> Result<(DependenceSpec, bool), CliError> {
        let (sites, covariates) = self.sites()?;
        let cov = self.cfg.config.covariance.ok_or_else(|| missing("covariance.theta1"))?;
        let mix = self.cfg.mixture()?;
        let gaussian = mix.is_none();
        let spec = DependenceSpec::new(
            sites,
            cov,
            self.cfg.config.mean.clone(),
            &covariates,
            mix.unwrap_or_else(GammaMixture::degenerate),
        )?;
        Ok((spec, gaussian))
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let cfg = config::load(path)?;
    let seed = cli
        .seed
        .or(cfg.config.seed)
        .ok_or_else(|| CliError::Usage("missing config field `seed` (or pass --seed)".into()))?;
    let out = match (&cli.out, &cfg.config.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => cfg.resolve(o),
        (None, None) => return Err(CliError::Usage("missing config field `out` (or pass --out)".into())),
    };
    fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    let ctx = Ctx {
        cfg,
        seed,
        out,
        cap: cli.grid_cap,
    };
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Estimate => estimate(&ctx),
        Command::Interpolate => interpolate(&ctx),
        Command::Condsim => condsim(&ctx),
        Command::ReproduceSynthetic => reproduce(&ctx),
        Command::Diagnose => diagnose(&ctx),
    }
}

fn summary(label: &str, m: &SampleMatrix) {
    let v = m.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{label}: {} realizations x {} sites, mean {mean:.4}, sd {sd:.4}, min {min:.4}, max {max:.4}",
        m.nrows(),
        m.ncols()
    );
}

fn simulate(ctx: &Ctx) -> Result<(), CliError> {
    let sc = ctx.cfg.config.simulate.as_ref().ok_or_else(|| missing("simulate.n"))?;
    if sc.n == 0 {
        return Err(CliError::Usage("`simulate.n` must be positive".into()));
    }
    let (spec, gaussian) = ctx.spec()?;
    let field = sc.field.unwrap_or(if gaussian { FieldChoice::Gaussian } else { FieldChoice::Scalemix });
    if field == FieldChoice::Scalemix && gaussian {
        return Err(CliError::Usage("`simulate.field = \"scalemix\"` needs a non-Gaussian `mixture`".into()));
    }
    let m = match field {
        FieldChoice::Gaussian => sample_gaussian(&spec, sc.n, ctx.seed),
        FieldChoice::Scalemix => sample_field(&spec, sc.n, ctx.seed),
    };
    let header = ctx.header().with("n", sc.n);
    write_sites(&ctx.path("sites.csv"), &header, spec.sites().expect("configured sites"))?;
    match sc.format {
        OutputFormat::Csv => write_samples_csv(&ctx.path("samples.csv"), &header, &m)?,
        OutputFormat::Binary => {
            let mut buf = Vec::new();
            write_binary_to(&mut buf, &m)?;
            fs::write(ctx.path("samples.smx"), buf).map_err(scalemix::Error::from)?;
            let meta = header.with("kind", serde_json::to_value(m.kind()).expect("enum serializes"));
            fs::write(ctx.path("samples.smx.json"), serde_json::to_string_pretty(&meta.0).expect("json") + "\n")
                .map_err(scalemix::Error::from)?;
            if let Some(v) = m.v_draws() {
                let rows: Vec<Vec<f64>> = v.iter().map(|&x| vec![x]).collect();
                write_table(&ctx.path("v_draws.csv"), &meta, &["v"], &rows)?;
            }
        }
    }
    summary(&format!("{:?} field", m.kind()).to_lowercase(), &m);
    Ok(())
}

fn read_matrix(path: &Path) -> Result<SampleMatrix, CliError> {
    let is_binary = path.extension().is_some_and(|e| e == "smx");
    Ok(if is_binary { read_samples_binary(path)? } else { read_samples_csv(path)? })
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    experiment: &'a str,
    config_hash: &'a str,
    seed: u64,
    config: &'a EstimationConfig,
    result: &'a EstimationResult,
}

fn estimate(ctx: &Ctx) -> Result<(), CliError> {
    let (cfg, data_path) = ctx.cfg.estimation(ctx.seed)?;
    let data = read_matrix(&data_path)?;
    let (sites, _) = ctx.sites()?;
    if sites.len() != data.ncols() {
        return Err(CliError::Input(format!(
            "{}: {} columns for {} configured sites",
            data_path.display(),
            data.ncols(),
            sites.len()
        )));
    }
    let res = estimate_all(&data, &sites, &cfg)?;
    let report = EstimateReport {
        experiment: &ctx.cfg.config.experiment,
        config_hash: &ctx.cfg.hash,
        seed: ctx.seed,
        config: &cfg,
        result: &res,
    };
    fs::write(ctx.path("estimate.json"), serde_json::to_string_pretty(&report).expect("json") + "\n")
        .map_err(scalemix::Error::from)?;
    let header = ctx.header();
    let rows: Vec<Vec<f64>> = (1..=cfg.k).map(|k| vec![k as f64, res.m_hat.get(k), res.c_hat.get(k)]).collect();
    write_table(&ctx.path("moments.csv"), &header, &["k", "m_hat", "c_hat"], &rows)?;
    write_mixture(&ctx.path("mixture.csv"), &header, &res.mix)?;
    println!(
        "covariance {:?} range {:.4} shape {:.4} sill {:.4} nugget {:.4}",
        res.cov.kind, res.cov.theta1, res.cov.theta2, res.cov.sigma1sq, res.cov.sigma0sq
    );
    println!("m_hat {:.4?}, moment residual {:.3e}", res.m_hat.0, res.residual);
    for w in &res.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Observations file with columns `site` (0-based index into the
/// configured sites) and `value`.
fn read_observations(path: &Path) -> Result<(Vec<usize>, Vec<f64>), CliError> {
    let t = read_numeric_table(path)?;
    let (si, vi) = (t.column_index(path, "site")?, t.column_index(path, "value")?);
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    for (line, r) in &t.rows {
        let s = r[si];
        if s < 0.0 || s.fract() != 0.0 {
            return Err(CliError::Input(format!("{}:{line}: site must be a non-negative integer", path.display())));
        }
        idx.push(s as usize);
        vals.push(r[vi]);
    }
    if idx.is_empty() {
        return Err(CliError::Input(format!("{}: no observations", path.display())));
    }
    Ok((idx, vals))
}

fn interpolate(ctx: &Ctx) -> Result<(), CliError> {
    let ic = ctx.cfg.config.interpolate.as_ref().ok_or_else(|| missing("interpolate.observations"))?;
    let (spec, _) = ctx.spec()?;
    let (idx, vals) = read_observations(&ctx.cfg.resolve(&ic.observations))?;
    let target = SiteSet::new(vec![ic.target])?;
    let mut cond = ConditioningSet::new(idx, vals, target)?;
    if !ic.target_covariates.is_empty() {
        cond = cond.with_target_covariates(vec![ic.target_covariates.clone()]);
    }
    let levels: Vec<f64> = match (&ic.levels, &ic.grid) {
        (Some(l), None) => l.clone(),
        (None, Some(g)) => {
            if g.steps < 2 || !(g.to > g.from) {
                return Err(CliError::Usage("`interpolate.grid` needs to > from and steps >= 2".into()));
            }
            (0..g.steps).map(|i| g.from + (g.to - g.from) * i as f64 / (g.steps - 1) as f64).collect()
        }
        (Some(_), Some(_)) => return Err(CliError::Usage("give `interpolate.levels` or `interpolate.grid`, not both".into())),
        (None, None) => return Err(missing("interpolate.levels")),
    };
    if levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::Usage("`interpolate.levels` must be non-decreasing".into()));
    }
    let interp = SaddlepointInterpolator::new(&spec, &cond)?;
    let (m, s) = interp.kriging();
    let mut rows = Vec::with_capacity(levels.len());
    for &a in &levels {
        let r = interp.cdf(a)?;
        rows.push(vec![a, r.probability, interp.gaussian_cdf(a), r.r, r.q, if r.interpolated { 1.0 } else { 0.0 }]);
    }
    let header = ctx.header().with("kriging_mean", m).with("kriging_sd", s);
    write_table(
        &ctx.path("interpolate.csv"),
        &header,
        &["a", "cdf", "gaussian_cdf", "r", "q", "interpolated"],
        &rows,
    )?;
    println!("kriging mean {m:.6}, sd {s:.6}; {} levels written", levels.len());
    Ok(())
}

fn condsim(ctx: &Ctx) -> Result<(), CliError> {
    let cc = ctx.cfg.config.condsim.as_ref().ok_or_else(|| missing("condsim.observations"))?;
    if cc.b == 0 {
        return Err(CliError::Usage("`condsim.b` must be positive".into()));
    }
    let (spec, _) = ctx.spec()?;
    let (idx, vals) = read_observations(&ctx.cfg.resolve(&cc.observations))?;
    let (targets, tcov) = read_sites(&ctx.cfg.resolve(&cc.targets), true)?;
    let mut cond = ConditioningSet::new(idx, vals, targets)?;
    if !tcov.is_empty() {
        cond = cond.with_target_covariates(tcov);
    }
    let mcmc = cc.mcmc.to_mcmc(cc.b, ctx.seed);
    mcmc.validate()?;
    let ens = conditional_simulate(&spec, &cond, cc.b, &mcmc)?;
    let header = ctx.header().with("b", cc.b);
    write_samples_csv(&ctx.path("condsim.csv"), &header, &ens.samples)?;
    let chain: Vec<Vec<f64>> = ens.chain.samples.iter().enumerate().map(|(i, &v)| vec![i as f64, v]).collect();
    let ch = header
        .with("acceptance_rate", ens.chain.acceptance_rate)
        .with("ess", ens.chain.ess)
        .with("flagged", ens.chain.flagged);
    write_table(&ctx.path("vchain.csv"), &ch, &["iteration", "v"], &chain)?;
    println!(
        "{} conditional realizations at {} targets; V chain mean {:.4}, acceptance {:.3}, ESS {:.1}",
        cc.b,
        cond.n_targets(),
        ens.chain.mean(),
        ens.chain.acceptance_rate,
        ens.chain.ess
    );
    if ens.chain.flagged {
        eprintln!("warning: effective sample size {:.1} is below the reliability floor", ens.chain.ess);
    }
    Ok(())
}

fn diagnose(ctx: &Ctx) -> Result<(), CliError> {
    let dc = ctx.cfg.config.diagnose.as_ref().ok_or_else(|| missing("diagnose.data"))?;
    let data = read_matrix(&ctx.cfg.resolve(&dc.data))?;
    let baseline = dc.baseline.as_ref().map(|p| read_matrix(&ctx.cfg.resolve(p))).transpose()?;
    if let Some(b) = &baseline {
        if b.ncols() != data.ncols() {
            return Err(CliError::Input("data and baseline have different numbers of sites".into()));
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (levels, stat): (Vec<f64>, Box<dyn Fn(&SampleMatrix) -> Result<Vec<f64>, scalemix::Error> + Sync>) =
        match dc.statistic {
            Statistic::Count => {
                if dc.thresholds.is_empty() {
                    return Err(missing("diagnose.thresholds"));
                }
                let th = dc.thresholds.clone();
                (
                    th.clone(),
                    Box::new(move |m: &SampleMatrix| {
                        Ok(th
                            .iter()
                            .map(|&a| mean(&threshold_counts(m, a).iter().map(|&c| c as f64).collect::<Vec<_>>()))
                            .collect())
                    }),
                )
            }
            Statistic::Sum => {
                let a = dc.thresholds.first().copied().unwrap_or(0.0);
                let probs = dc.quantiles.clone();
                (
                    probs.clone(),
                    Box::new(move |m: &SampleMatrix| {
                        Ok(quantile_table(&exceedance_sums(m, a), &probs, None)?.rows.iter().map(|r| r.value).collect())
                    }),
                )
            }
            Statistic::Congregation => {
                if dc.indices.is_empty() {
                    return Err(missing("diagnose.indices"));
                }
                if dc.percentiles.is_empty() {
                    return Err(missing("diagnose.percentiles"));
                }
                let (idx, bs) = (dc.indices.clone(), dc.percentiles.clone());
                (
                    bs.clone(),
                    Box::new(move |m: &SampleMatrix| bs.iter().map(|&b| congregation_entropy(m, &idx, b)).collect()),
                )
            }
        };
    let values = stat(&data)?;
    let base_values = baseline.as_ref().map(|b| stat(b)).transpose()?;
    let band: Option<Band> = if dc.bootstrap_reps > 0 {
        let (spec, _) = ctx.spec()?;
        if spec.dim() != data.ncols() {
            return Err(CliError::Input(format!(
                "bootstrap model has {} sites but the data has {}",
                spec.dim(),
                data.ncols()
            )));
        }
        let f = |m: &SampleMatrix| stat(m).unwrap_or_else(|_| vec![f64::NAN; levels.len()]);
        Some(bootstrap_band(&spec, data.nrows(), dc.bootstrap_reps, f, (dc.band[0], dc.band[1]), ctx.seed)?)
    } else {
        None
    };
    let mut columns = vec!["level", "value"];
    if base_values.is_some() {
        columns.extend(["baseline", "ratio"]);
    }
    if band.is_some() {
        columns.extend(["lower", "upper"]);
    }
    let rows: Vec<Vec<f64>> = levels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut r = vec![l, values[i]];
            if let Some(b) = &base_values {
                r.extend([b[i], values[i] / b[i]]);
            }
            if let Some(bd) = &band {
                r.extend([bd.lower[i], bd.upper[i]]);
            }
            r
        })
        .collect();
    let stat_name = match dc.statistic {
        Statistic::Count => "mean_threshold_count",
        Statistic::Sum => "exceedance_sum_quantile",
        Statistic::Congregation => "congregation_entropy",
    };
    let mut header = ctx.header().with("statistic", stat_name).with("quantiles", "nearest_rank");
    if let Some(b) = &band {
        header = header.with("bootstrap_reps", b.reps);
    }
    write_table(&ctx.path("diagnose.csv"), &header, &columns, &rows)?;
    println!("{stat_name}: {} levels written", rows.len());
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn reproduce(ctx: &Ctx) -> Result<(), CliError> {
    let rc = ctx.cfg.config.reproduce.clone().unwrap_or_else(ReproduceConfig::default);
    if rc.n < 2 || rc.side == 0 || rc.estimation_runs == 0 {
        return Err(CliError::Usage("`reproduce` needs n >= 2, side >= 1 and estimation_runs >= 1".into()));
    }
    let header = ctx.header().with("side", rc.side).with("n", rc.n).with("layout_seed", study::LAYOUT_SEED);
    let spec = study::grid_spec(rc.side, ctx.cap, study::mixture())?;

    // (i) exceedance-sum quantiles of the three fields.
    let fields = study::simulate_fields(&spec, rc.n, ctx.seed)?;
    let [g, x, w] = study::sum_tables(&fields, &rc.sum_probs)?;
    let rows: Vec<Vec<f64>> = (0..rc.sum_probs.len())
        .map(|i| {
            vec![
                rc.sum_probs[i],
                g.rows[i].value,
                x.rows[i].value,
                w.rows[i].value,
                x.rows[i].rel_increase.unwrap_or(f64::NAN),
                w.rows[i].rel_increase.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    write_table(
        &ctx.path("sum_quantiles.csv"),
        &header.clone().with("quantiles", "nearest_rank"),
        &["prob", "gaussian", "scalemix", "matched", "scalemix_increase_pct", "matched_increase_pct"],
        &rows,
    )?;
    println!("sum of positive values, % increase over Gaussian:");
    for r in &rows {
        println!("  p={:<7} scalemix {:+.2}%  matched {:+.2}%", r[0], r[4], r[5]);
    }

    // (ii) threshold counts per realization.
    let mut cols = vec!["realization".to_string()];
    let mut per_field = Vec::new();
    for &a in &rc.thresholds {
        for (name, m) in [("gaussian", &fields.gaussian), ("scalemix", &fields.scalemix), ("matched", &fields.matched)] {
            cols.push(format!("{name}_{a}"));
            per_field.push(threshold_counts(m, a));
        }
    }
    let rows: Vec<Vec<f64>> = (0..rc.n)
        .map(|i| std::iter::once(i as f64).chain(per_field.iter().map(|c| c[i] as f64)).collect())
        .collect();
    let names: Vec<&str> = cols.iter().map(String::as_str).collect();
    write_table(&ctx.path("threshold_counts.csv"), &header, &names, &rows)?;
    for (k, c) in per_field.iter().enumerate() {
        let m = c.iter().sum::<usize>() as f64 / rc.n as f64;
        println!("  mean count {:<16} {m:.3}", cols[k + 1]);
    }
    drop(fields);

    // (iii) moment and cumulant estimates at the stations.
    let est = EstimationConfig::default();
    let mut gm = vec![Vec::new(); est.k];
    let mut xm = vec![Vec::new(); est.k];
    let mut gc = vec![Vec::new(); est.k];
    let mut xc = vec![Vec::new(); est.k];
    for r in 0..rc.estimation_runs {
        let t = study::moment_table(ctx.seed.wrapping_add(r as u64), &EstimationConfig { seed: ctx.seed, ..est })?;
        for k in 0..est.k {
            gm[k].push(t.gaussian.m_hat.0[k]);
            xm[k].push(t.scalemix.m_hat.0[k]);
            gc[k].push(t.gaussian.c_hat.0[k]);
            xc[k].push(t.scalemix.c_hat.0[k]);
        }
    }
    let truth_m = study::mixture().moments(est.k);
    let truth_c = moments_to_cumulants(&truth_m)?;
    let mut rows = Vec::new();
    for k in 0..est.k {
        rows.push((format!("m{}", k + 1), vec![median(&mut gm[k]), median(&mut xm[k]), truth_m.0[k]]));
    }
    for k in 0..est.k {
        rows.push((format!("c{}", k + 1), vec![median(&mut gc[k]), median(&mut xc[k]), truth_c.0[k]]));
    }
    write_labeled_table(
        &ctx.path("moments.csv"),
        &header.clone().with("estimation_runs", rc.estimation_runs).with("stations", study::N_STATIONS),
        &["coefficient", "gaussian", "scalemix", "model"],
        &rows,
    )?;
    println!("median m2 hat over {} runs: gaussian {:.4}, scalemix {:.4}", rc.estimation_runs, rows[1].1[0], rows[1].1[1]);

    // (iv) conditional quantile curves at the target station.
    let curves = study::conditional_curves(&study::mixture(), &rc.scalings, &rc.counts, &rc.percentiles)?;
    let rows: Vec<Vec<f64>> =
        curves.iter().map(|c| vec![c.scaling, c.count as f64, c.prob, c.scalemix, c.gaussian]).collect();
    write_table(
        &ctx.path("conditional_curves.csv"),
        &header,
        &["scaling", "count", "prob", "scalemix", "gaussian"],
        &rows,
    )?;
    write_sites(&ctx.path("stations.csv"), &header, &study::stations())?;
    println!("bundle written to {}", ctx.out.display());
    Ok(())
}
