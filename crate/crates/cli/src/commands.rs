use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dcssl::augment::{run_ssl_detailed, AugmentedEstimate, Method};
use dcssl::data::{load_cohort, write_cohort};
use dcssl::sim::{gen_cohort, run_mc_ungated};
use dcssl::{CensoringCode, Cohort};
use serde_json::{json, Value};

use crate::config::RunConfig;

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("--{flag} is required (flag or config file)"))
}

/// `#`-prefixed lines carrying the version and resolved config.
fn comment_header(cfg: &RunConfig) -> String {
    format!("# {}\n# config: {}\n", crate::VERSION, serde_json::to_string(&cfg.echo()["config"]).expect("config serialises"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn fractions<'a>(codes: impl Iterator<Item = &'a CensoringCode>) -> (usize, [f64; 3]) {
    let mut counts = [0usize; 3];
    let mut n = 0;
    for c in codes {
        n += 1;
        counts[match c {
            CensoringCode::Exact => 0,
            CensoringCode::Right => 1,
            CensoringCode::Left => 2,
        }] += 1;
    }
    let d = n.max(1) as f64;
    (n, counts.map(|c| c as f64 / d))
}

fn print_fractions(label: &str, (n, f): (usize, [f64; 3])) {
    println!(
        "{label:<22} n = {n:>6}  exact {:5.1}%  right {:5.1}%  left {:5.1}%",
        100.0 * f[0],
        100.0 * f[1],
        100.0 * f[2]
    );
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "output")?;
    let cohort = gen_cohort(&cfg.sim, 0).context("generating cohort")?;
    let mut bytes = comment_header(cfg).into_bytes();
    write_cohort(&mut bytes, &cohort)?;
    write(out, &bytes)?;
    let outcomes: Vec<CensoringCode> = cohort.records().iter().filter_map(|r| r.outcome.map(|o| o.delta)).collect();
    print_fractions("labeled outcome", fractions(outcomes.iter()));
    print_fractions("surrogate, all", fractions(cohort.records().iter().map(|r| &r.surrogate.delta)));
    println!("wrote {} rows to {}", cohort.len(), out.display());
    Ok(())
}

fn block(e: &AugmentedEstimate) -> Value {
    let cov: Vec<Vec<f64>> = (0..e.cov.nrows()).map(|i| e.cov.row(i).iter().cloned().collect()).collect();
    json!({
        "available": true,
        "beta": e.beta,
        "se": e.se,
        "ci95": e.ci95,
        "re": e.re_vs_sl,
        "cov": cov,
        "ridge": e.ridge,
    })
}

/// Why a requested estimator was not produced, or `None` if it was not requested.
fn missing_reason(m: Method, cfg: &RunConfig, n_unlabeled: usize) -> Option<&'static str> {
    let (need4, need5) = match m {
        Method::Sl => return None,
        Method::Ssl1 => (true, false),
        Method::Ssl2 => (false, true),
        Method::Ssl3 => (true, true),
    };
    if (need4 && !cfg.ssl.use_model4) || (need5 && !cfg.ssl.use_model5) {
        return Some("working model disabled");
    }
    if n_unlabeled == 0 {
        return Some("no unlabeled subjects");
    }
    Some("not produced")
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let out = required(&cfg.output, "output")?;
    let cohort: Cohort = load_cohort(input, &cfg.schema).with_context(|| format!("reading {}", input.display()))?;
    let (lab, unlab) = cohort.split();
    let res = run_ssl_detailed(&lab, &unlab, &cfg.ssl).context("fit failed")?;

    let mut blocks = serde_json::Map::new();
    let mut bad = Vec::new();
    for m in Method::ALL {
        match res.get(m) {
            Some(e) => {
                if !e.se.iter().all(|s| s.is_finite()) {
                    bad.push(m.to_string());
                }
                blocks.insert(m.to_string(), block(e));
            }
            None => {
                if let Some(reason) = missing_reason(m, cfg, unlab.len()) {
                    blocks.insert(m.to_string(), json!({"available": false, "reason": reason}));
                }
            }
        }
    }
    let mut doc = cfg.echo();
    doc["n_labeled"] = json!(lab.len());
    doc["n_unlabeled"] = json!(unlab.len());
    doc["estimates"] = Value::Object(blocks);
    doc["diagnostics"] = serde_json::to_value(&res.diagnostics)?;
    doc["gamma1"] = serde_json::to_value(&res.gamma1)?;
    doc["gamma2"] = serde_json::to_value(&res.gamma2)?;
    write(out, serde_json::to_string_pretty(&doc)?.as_bytes())?;

    println!("{:<6} {:>5} {:>10} {:>10} {:>8}", "method", "coef", "estimate", "se", "re");
    for e in &res.estimates {
        for j in 0..e.beta.len() {
            println!("{:<6} {:>5} {:>10.4} {:>10.4} {:>8.4}", e.method.to_string(), format!("beta{}", j + 1), e.beta[j], e.se[j], e.re_vs_sl[j]);
        }
    }
    println!("wrote {}", out.display());
    if !bad.is_empty() {
        bail!("non-finite standard errors for {}", bad.join(", "));
    }
    Ok(())
}

pub fn mc(cfg: &RunConfig) -> Result<()> {
    let dir = required(&cfg.output, "output")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build()?;
    let run = pool.install(|| run_mc_ungated(&cfg.sim, &cfg.ssl)).context("Monte Carlo run")?;

    let csv = run.summary.to_csv();
    let mut summary = comment_header(cfg);
    summary.push_str(&csv);
    write(&dir.join("summary.csv"), summary.as_bytes())?;
    let mut doc = cfg.echo();
    doc["summary"] = serde_json::to_value(&run.summary)?;
    doc["records"] = serde_json::to_value(&run.records)?;
    write(&dir.join("replications.json"), serde_json::to_string(&doc)?.as_bytes())?;

    print!("{csv}");
    println!("{} of {} replications failed; wrote {}", run.summary.failed, run.summary.reps, dir.display());
    for r in run.records.iter().filter(|r| r.error.is_some()).take(5) {
        eprintln!("replication {}: {}", r.rep_index, r.error.as_deref().unwrap_or(""));
    }
    run.check_failure_rate()?;
    Ok(())
}
