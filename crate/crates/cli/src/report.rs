//! Report assembly and deterministic file output.
//!
//! Outputs are pure functions of (inputs, flags, seed): no wall-clock values
//! are ever written, so identical invocations produce identical bytes. The
//! `timings` block carries planned work counts instead.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use bartvs::data::{Dataset, ResponseKind};
use bartvs::importance::{
    lemma_bound_check, metropolis_importance, mpvip, vip, vip_approx, within_type_vip,
};
use bartvs::sampler::{fit_auto, predict, SamplerConfig};
use bartvs::selection::SelectionReport;
use bartvs::simbench::BenchResult;

pub struct Rendered {
    pub json: serde_json::Value,
    pub csv: String,
}

pub fn write_output(rendered: &Rendered, format: &str, path: Option<&Path>) -> Result<()> {
    let body = match format {
        "json" => format!("{:#}\n", rendered.json),
        "csv" => rendered.csv.clone(),
        other => bail!("unknown output format '{other}' (expected json or csv)"),
    };
    match path {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

/// Fit a model and assemble the config echo, error-scale trace summary, and
/// every importance measure.
pub fn fit_report(data: &Dataset, cfg: &SamplerConfig) -> Result<Rendered> {
    let chain = fit_auto(data, cfg)?;
    let scored = [
        ("vip", vip(&chain)?.scores),
        ("vip_approx", vip_approx(&chain)?.scores),
        (
            "within_type_vip",
            within_type_vip(&chain, &data.types)?.scores,
        ),
        ("metropolis", metropolis_importance(&chain)?.scores),
        ("mpvip", mpvip(&chain)?.scores),
    ];
    let bounds = lemma_bound_check(&chain)?;

    let named = |scores: &[f64]| -> Vec<serde_json::Value> {
        scores
            .iter()
            .zip(&data.names)
            .map(|(s, n)| json!({ "name": n, "score": s }))
            .collect()
    };
    let mut importance = serde_json::Map::new();
    let mut csv = String::from("kind,name,score\n");
    for (kind, scores) in &scored {
        importance.insert(kind.to_string(), json!(named(scores)));
        for (s, n) in scores.iter().zip(&data.names) {
            csv.push_str(&format!("{kind},{n},{s}\n"));
        }
    }

    let sigmas: Vec<f64> = chain.draws.iter().map(|d| d.sigma).collect();
    let model_block = match chain.response {
        ResponseKind::Continuous => json!({
            "model": "continuous",
            "sigma": {
                "mean": bartvs::math::mean(&sigmas),
                "sd": bartvs::math::sample_sd(&sigmas),
                "min": sigmas.iter().copied().fold(f64::INFINITY, f64::min),
                "max": sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            },
        }),
        ResponseKind::Binary => {
            let preds = predict(&chain, &data.rows())?;
            let probs = preds.prob_mean.expect("probit probabilities");
            json!({
                "model": "probit",
                "train_probability": {
                    "mean": bartvs::math::mean(&probs),
                    "min": probs.iter().copied().fold(f64::INFINITY, f64::min),
                    "max": probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                },
            })
        }
    };

    let json = json!({
        "config": cfg,
        "model": model_block,
        "predictors": data.names,
        "types": data.types,
        "importance": importance,
        "approximation_bound": {
            "max_gap": bounds.iter().map(|b| b.gap).fold(0.0, f64::max),
            "max_bound": bounds.iter().map(|b| b.bound).fold(0.0, f64::max),
        },
        "timings": { "fits": 1, "kept_draws": cfg.n_keep, "trees": cfg.n_trees },
    });
    Ok(Rendered { json, csv })
}

/// Wrap a selection report with its configuration echo and work counts.
pub fn select_report(report: &SelectionReport) -> Result<Rendered> {
    let mut csv = String::from("name,score,threshold,selected\n");
    for d in &report.predictors {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            d.name, d.score, d.threshold, d.selected
        ));
    }
    let json = serde_json::to_value(report)?;
    Ok(Rendered { json, csv })
}

/// Write the benchmark summary JSON, the paper-style table CSV, and the
/// long-format per-replication CSV.
pub fn write_bench(result: &BenchResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let stem = format!(
        "bench_{}_n{}_p{}",
        result.scenario.id.label(),
        result.scenario.n,
        result.scenario.p
    );

    let json_path = dir.join(format!("{stem}_summary.json"));
    std::fs::write(&json_path, format!("{:#}\n", serde_json::to_value(result)?))
        .with_context(|| format!("writing {}", json_path.display()))?;

    let mut table = String::from(
        "method,r_miss,recall,recall_se,precision,precision_se,f1,f1_se,replications,empty_selections,failures\n",
    );
    for s in &result.summaries {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.method,
            s.r_miss,
            s.recall,
            s.recall_se,
            s.precision,
            s.precision_se,
            s.f1,
            s.f1_se,
            s.n_replications,
            s.n_empty,
            s.n_failed
        ));
    }
    let table_path = dir.join(format!("{stem}_table.csv"));
    std::fs::write(&table_path, table)
        .with_context(|| format!("writing {}", table_path.display()))?;

    let mut detail = String::from("scenario,method,replication,metric,value\n");
    let scen = result.scenario.id.label();
    for d in &result.details {
        if let Some(m) = d.metrics {
            for (metric, value) in [
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
                ("missed", if m.missed { 1.0 } else { 0.0 }),
                ("selected_count", d.selected.len() as f64),
            ] {
                detail.push_str(&format!(
                    "{scen},{},{},{metric},{value}\n",
                    d.method, d.replication
                ));
            }
        } else {
            detail.push_str(&format!(
                "{scen},{},{},failed,1\n",
                d.method, d.replication
            ));
        }
    }
    let detail_path = dir.join(format!("{stem}_detail.csv"));
    std::fs::write(&detail_path, detail)
        .with_context(|| format!("writing {}", detail_path.display()))?;
    Ok(())
}
