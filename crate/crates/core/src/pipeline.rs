//! Experiment orchestration and artifact emission.
//!
//! Every command builds its artifacts in memory, then writes them in name
//! order followed by `manifest.json`. Numbers use Rust's shortest round-trip
//! formatting, and nothing time- or host-dependent enters any file, so a rerun
//! with the same config reproduces every byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::config::{form_name, hex_digest, ExperimentConfig};
use crate::dgp::{derive_seed, simulate_panel, GrowthPanel};
use crate::error::{Error, Result};
use crate::forecast::{cg_regression, forecast_panel, CgRegression, FitMode, ForecastPanel};
use crate::ingest::{ingest_forecast_panel, IngestReport};
use crate::pricing::{simulate_priced_panel, PricedPanel};
use crate::stats::{
    binned_curve, fit_student_nu, mad_normalize, mad_normalize_forecasts, qq_tail, BinnedCurve,
    CurveOptions, Reference,
};
use crate::strategy::{optimize_inflections, ReturnPanel, StrategyReport};

pub const MANIFEST: &str = "manifest.json";

// Seed streams derived from the master seed, far above any firm index.
const CURVE_STREAM: u64 = 1 << 40;
const PRICED_STREAM: u64 = 1 << 41;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Simulated growth panel and its forecast records.
    Simulate,
    /// Growth, error-on-revision and error-on-error curves, QQ tables, CG regression.
    Analyze,
    /// The forecast diagnostics on an external panel.
    Ingest(PathBuf),
    /// Priced panel and the return-on-past-return curve.
    Price,
    /// Momentum strategy Sharpe surface on the priced panel.
    Backtest,
    /// Analyze, price and backtest in one run.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Analyze => "analyze",
            Command::Ingest(_) => "ingest",
            Command::Price => "price",
            Command::Backtest => "backtest",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub row_counts: BTreeMap<String, usize>,
    /// SHA-256 of every artifact, by file name.
    pub artifacts: BTreeMap<String, String>,
}

/// Files of one run, held in memory until written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArtifactSet {
    pub files: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub row_counts: BTreeMap<String, usize>,
}

impl ArtifactSet {
    fn add(&mut self, name: &str, body: String) {
        self.files.insert(name.to_string(), body);
    }

    fn count(&mut self, key: &str, n: usize) {
        self.row_counts.insert(key.to_string(), n);
    }

    pub fn manifest(&self, cfg: &ExperimentConfig, command: &Command) -> Manifest {
        let config = cfg
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut artifacts: BTreeMap<String, String> = self
            .files
            .iter()
            .map(|(k, v)| (k.clone(), hex_digest(v.as_bytes())))
            .collect();
        if let Command::Ingest(path) = command {
            artifacts.insert("input".into(), path.display().to_string());
        }
        Manifest {
            command: command.name().to_string(),
            config_hash: cfg.hash(),
            config,
            seeds: self.seeds.clone(),
            row_counts: self.row_counts.clone(),
            artifacts,
        }
    }
}

/// Paths written by a run and the manifest describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub written: Vec<PathBuf>,
    pub manifest: Manifest,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn curve_csv(c: &BinnedCurve, opts: &CurveOptions, x_name: &str, y_name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# x={x_name} y={y_name} bins={} bandwidth={} n_obs={} degree={} n_boot={} level={} seed={} dropped_replicates={}",
        c.n_bins, c.bandwidth, c.n_obs, opts.degree, opts.n_boot, opts.level, opts.seed, c.dropped_replicates
    );
    s.push_str("bin_index,bin_x,bin_y,loess_y,ci_lo,ci_hi\n");
    for k in 0..c.n_bins {
        let _ = writeln!(
            s,
            "{k},{},{},{},{},{}",
            c.bin_x[k], c.bin_y[k], c.loess_y[k], c.ci_lo[k], c.ci_hi[k]
        );
    }
    s
}

fn cg_csv(cg: &CgRegression) -> String {
    format!("alpha,beta,se_beta,n\n{},{},{},{}\n", cg.alpha, cg.beta, cg.se_beta, cg.n)
}

fn write_number(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: ArtifactSet,
    curves: u64,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        let mut out = ArtifactSet::default();
        out.seeds.insert("master_seed".into(), cfg.panel.master_seed);
        Self { cfg, out, curves: 0 }
    }

    fn curve_options(&mut self, name: &str) -> CurveOptions {
        let a = &self.cfg.analysis;
        let seed = derive_seed(self.cfg.panel.master_seed, CURVE_STREAM + self.curves);
        self.curves += 1;
        self.out.seeds.insert(format!("{name}_bootstrap"), seed);
        CurveOptions {
            n_bins: a.n_bins,
            n_boot: a.n_boot,
            level: a.level,
            degree: a.degree,
            seed,
        }
    }

    fn curve(
        &mut self,
        stage_name: &'static str,
        x: &[f64],
        y: &[f64],
        x_name: &str,
        y_name: &str,
    ) -> Result<BinnedCurve> {
        let opts = self.curve_options(stage_name);
        let c = stage(stage_name, binned_curve(x, y, &opts))?;
        self.out
            .add(&format!("{stage_name}.csv"), curve_csv(&c, &opts, x_name, y_name));
        self.out.count(&format!("{stage_name}_pairs"), x.len());
        info!("{stage_name}: {} pairs, bandwidth {}", x.len(), c.bandwidth);
        Ok(c)
    }

    fn growth_panel(&mut self) -> Result<GrowthPanel> {
        let p = &self.cfg.panel;
        let panel = stage(
            "simulate",
            simulate_panel(&self.cfg.model, p.n_firms, p.t_len, p.master_seed),
        )?;
        self.out.count("growth_obs", panel.n_obs());
        Ok(panel)
    }

    fn forecasts(&mut self, panel: &GrowthPanel) -> Result<ForecastPanel> {
        let fp = stage(
            "forecast",
            forecast_panel(
                panel,
                self.cfg.model.ar_order,
                self.cfg.panel.min_window,
                &FitMode::Expanding,
            ),
        )?;
        self.out.count("forecast_records", fp.len());
        self.out.count("forecast_skipped", fp.skipped);
        Ok(fp)
    }

    fn maybe_normalize(&mut self, fp: ForecastPanel) -> Result<ForecastPanel> {
        if !self.cfg.analysis.normalize {
            return Ok(fp);
        }
        let (norm, report) = stage("normalize", mad_normalize_forecasts(&fp))?;
        self.out.count("mad_excluded_forecast_firms", report.excluded.len());
        Ok(norm)
    }

    fn forecast_diagnostics(&mut self, fp: &ForecastPanel) -> Result<()> {
        let (rev, err) = fp.revision_error_pairs();
        self.curve("error_revision_curve", &rev, &err, "revision", "error")?;
        let (lag, err) = fp.lagged_error_pairs();
        self.curve("error_error_curve", &lag, &err, "lagged_error", "error")?;
        let cg = stage("cg", cg_regression(&fp.records))?;
        self.out.add("cg.csv", cg_csv(&cg));
        Ok(())
    }

    fn qq(&mut self, data: &[f64]) -> Result<()> {
        let tail = self.cfg.analysis.tail_level;
        let fit = stage("qq", fit_student_nu(data))?;
        let mut s = format!(
            "# n_obs={} tail_level={tail} student_nu={} student_scale={} effectively_gaussian={}\n",
            data.len(),
            fit.nu,
            fit.scale,
            fit.effectively_gaussian
        );
        s.push_str("prob_level,data_q,ref_q,reference\n");
        for reference in [Reference::Normal, Reference::Laplace, Reference::Student { nu: fit.nu }] {
            let q = stage("qq", qq_tail(data, reference, tail))?;
            for k in 0..q.prob_levels.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    q.prob_levels[k], q.data_q[k], q.ref_q[k], q.reference
                );
            }
        }
        self.out.add("qq.csv", s);
        self.out.count("qq_obs", data.len());
        Ok(())
    }

    fn analyze(&mut self) -> Result<()> {
        let panel = self.growth_panel()?;
        let series: Vec<(String, Vec<f64>)> = panel
            .firms
            .iter()
            .map(|f| (f.id.clone(), f.path.g.clone()))
            .collect();
        let series = if self.cfg.analysis.normalize {
            let norm = mad_normalize(&series, true);
            self.out.count("mad_excluded_growth_firms", norm.excluded.len());
            norm.series
        } else {
            series
        };
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (_, g) in &series {
            for w in g.windows(2) {
                x.push(w[0]);
                y.push(w[1]);
            }
        }
        self.curve("growth_curve", &x, &y, "lagged_growth", "growth")?;
        let pooled: Vec<f64> = series.iter().flat_map(|(_, g)| g.iter().copied()).collect();
        self.qq(&pooled)?;
        let fp = self.forecasts(&panel)?;
        let fp = self.maybe_normalize(fp)?;
        self.forecast_diagnostics(&fp)
    }

    fn simulate(&mut self) -> Result<()> {
        let panel = self.growth_panel()?;
        let mut s = String::from("firm_id,t,g,latent,eps\n");
        for f in &panel.firms {
            for t in 0..f.path.len() {
                let _ = writeln!(
                    s,
                    "{},{t},{},{},{}",
                    f.id, f.path.g[t], f.path.latent[t], f.path.eps[t]
                );
            }
        }
        self.out.add("growth_panel.csv", s);
        let fp = self.forecasts(&panel)?;
        let mut s = String::from("firm_id,t,f1,f2_prior,error,revision\n");
        for r in &fp.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.firm, r.t, r.f1, r.f2_prior, r.error, r.revision
            );
        }
        self.out.add("forecasts.csv", s);
        Ok(())
    }

    fn ingest(&mut self, path: &Path) -> Result<()> {
        let (fp, report) = stage("ingest", ingest_forecast_panel(path))?;
        self.ingest_counts(&report);
        if !report.diagnostics.is_empty() {
            self.out
                .add("ingest_diagnostics.txt", report.diagnostics.join("\n") + "\n");
        }
        let fp = self.maybe_normalize(fp)?;
        let realized: Vec<f64> = fp.records.iter().map(|r| r.f1 + r.error).collect();
        self.qq(&realized)?;
        self.forecast_diagnostics(&fp)
    }

    fn ingest_counts(&mut self, r: &IngestReport) {
        self.out.count("ingest_rows_in", r.rows_in);
        self.out.count("ingest_rows_kept", r.rows_kept);
        self.out.count("ingest_rows_malformed", r.rows_malformed);
        self.out.count("ingest_rows_incomplete", r.rows_incomplete);
    }

    fn priced_panel(&mut self) -> Result<PricedPanel> {
        let seed = derive_seed(self.cfg.panel.master_seed, PRICED_STREAM);
        self.out.seeds.insert("priced_panel".into(), seed);
        let pc = &self.cfg.pricing;
        let panel = stage(
            "price",
            simulate_priced_panel(
                &self.cfg.pricing_params(),
                pc.n_firms,
                pc.t_len,
                seed,
                self.cfg.panel.min_window,
                pc.horizon,
            ),
        )?;
        if panel.series.is_empty() {
            return Err(Error::Data("every firm failed the pricing conditions".into()).in_stage("price"));
        }
        self.out.count("priced_firms", panel.series.len());
        self.out.count("priced_firms_dropped", panel.dropped.len());
        Ok(panel)
    }

    fn price(&mut self) -> Result<PricedPanel> {
        let panel = self.priced_panel()?;
        let mut s = String::from("firm_id,t,dividend,price,return,log_return\n");
        for ps in &panel.series {
            for k in 0..ps.prices.len() {
                let (r, lr) = match ps.returns.get(k) {
                    Some(&r) => (write_number(r), write_number(ps.log_returns[k])),
                    None => (String::new(), String::new()),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{r},{lr}",
                    ps.firm,
                    ps.start + k,
                    ps.dividends[k],
                    ps.prices[k]
                );
            }
        }
        self.out.add("priced_panel.csv", s);
        if !panel.dropped.is_empty() {
            let mut s = String::from("firm_id,reason\n");
            for (firm, reason) in &panel.dropped {
                let _ = writeln!(s, "{firm},\"{}\"", reason.replace('"', "'"));
            }
            self.out.add("priced_dropped.csv", s);
        }
        let (x, y) = panel.lagged_return_pairs(true);
        self.curve("return_curve", &x, &y, "lagged_log_return", "log_return")?;
        Ok(panel)
    }

    fn backtest(&mut self, panel: &PricedPanel) -> Result<StrategyReport> {
        let rp = stage("backtest", ReturnPanel::from_priced(panel))?;
        let s = &self.cfg.strategy;
        let report = stage("backtest", optimize_inflections(&rp, s.grid_step, s.weight_form))?;
        let surface = report.surface.as_ref().expect("optimizer fills the surface");
        let mut csv = String::from("a,b,sharpe\n");
        for (a, b, sharpe) in surface.cells() {
            let _ = writeln!(csv, "{a},{b},{sharpe}");
        }
        self.out.add("sharpe_surface.csv", csv);
        let mut csv = format!(
            "# a={} b={} sharpe={} weight_form={}\nmonth,return\n",
            report.a,
            report.b,
            report.sharpe,
            form_name(report.form)
        );
        for (m, r) in report.months.iter().zip(&report.monthly_returns) {
            let _ = writeln!(csv, "{m},{r}");
        }
        self.out.add("strategy_returns.csv", csv);
        self.out.count("backtest_stocks", rp.n_stocks());
        self.out.count("backtest_months", report.months.len());
        Ok(report)
    }
}

/// Builds the artifacts of `command` without touching the file system.
pub fn build_artifacts(cfg: &ExperimentConfig, command: &Command) -> Result<ArtifactSet> {
    stage("config", cfg.validate())?;
    let mut run = Runner::new(cfg);
    match command {
        Command::Simulate => run.simulate()?,
        Command::Analyze => run.analyze()?,
        Command::Ingest(path) => run.ingest(path)?,
        Command::Price => {
            run.price()?;
        }
        Command::Backtest => {
            let panel = run.priced_panel()?;
            run.backtest(&panel)?;
        }
        Command::Report => {
            run.analyze()?;
            let panel = run.price()?;
            run.backtest(&panel)?;
        }
    }
    Ok(run.out)
}

/// Writes the artifact files and the manifest into `dir`.
pub fn write_artifacts(
    set: &ArtifactSet,
    cfg: &ExperimentConfig,
    command: &Command,
    dir: &Path,
) -> Result<RunSummary> {
    let io = |e: std::io::Error, p: &Path| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))).in_stage("write")
    };
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let mut written = Vec::with_capacity(set.files.len() + 1);
    for (name, body) in &set.files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| io(e, &path))?;
        written.push(path);
    }
    let manifest = set.manifest(cfg, command);
    let path = dir.join(MANIFEST);
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::from(e).in_stage("write"))?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| io(e, &path))?;
    written.push(path);
    Ok(RunSummary {
        output_dir: dir.to_path_buf(),
        written,
        manifest,
    })
}

pub fn run_command(cfg: &ExperimentConfig, command: &Command) -> Result<RunSummary> {
    let set = build_artifacts(cfg, command)?;
    write_artifacts(&set, cfg, command, &cfg.output_dir)
}

/// The full report: every curve, QQ table, CG table and the Sharpe surface.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_command(cfg, &Command::Report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.panel.n_firms = 12;
        cfg.panel.t_len = 120;
        cfg.analysis.n_bins = 10;
        cfg.analysis.n_boot = 20;
        cfg
    }

    #[test]
    fn analyze_emits_every_diagnostic() {
        let set = build_artifacts(&small(), &Command::Analyze).unwrap();
        let names: Vec<&str> = set.files.keys().map(String::as_str).collect();
        assert_eq!(
            names,
            [
                "cg.csv",
                "error_error_curve.csv",
                "error_revision_curve.csv",
                "growth_curve.csv",
                "qq.csv"
            ]
        );
        let curve = &set.files["growth_curve.csv"];
        let mut lines = curve.lines();
        let head = lines.next().unwrap();
        assert!(head.starts_with("# ") && head.contains("bins=10") && head.contains("bandwidth="));
        assert_eq!(lines.next().unwrap(), "bin_index,bin_x,bin_y,loess_y,ci_lo,ci_hi");
        assert_eq!(lines.count(), 10);
        let qq = &set.files["qq.csv"];
        assert!(qq.contains(",laplace\n") && qq.contains(",student("));
        assert_eq!(qq.lines().filter(|l| l.ends_with(",normal")).count(), 200);
    }

    #[test]
    fn artifacts_are_reproducible() {
        let cfg = small();
        let a = build_artifacts(&cfg, &Command::Analyze).unwrap();
        let b = build_artifacts(&cfg, &Command::Analyze).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.panel.master_seed = 2;
        let c = build_artifacts(&other, &Command::Analyze).unwrap();
        assert_ne!(a.files["growth_curve.csv"], c.files["growth_curve.csv"]);
    }

    #[test]
    fn failing_stage_is_named() {
        let mut cfg = small();
        cfg.panel.t_len = 30;
        let err = build_artifacts(&cfg, &Command::Analyze).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
        assert!(err.to_string().contains("stage `"), "{err}");
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let mut cfg = small();
        cfg.model.phi = 1.5;
        assert!(build_artifacts(&cfg, &Command::Analyze)
            .unwrap_err()
            .is_config_error());
    }

    #[test]
    fn manifest_hashes_each_file() {
        let cfg = small();
        let set = build_artifacts(&cfg, &Command::Simulate).unwrap();
        let m = set.manifest(&cfg, &Command::Simulate);
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.artifacts["forecasts.csv"], hex_digest(set.files["forecasts.csv"].as_bytes()));
        assert_eq!(m.row_counts["growth_obs"], 12 * 120);
        assert_eq!(m.config["panel.n_firms"], "12");
    }
}
