//! JSON front end for the statistics module.

use serde::Deserialize;
use serde_json::{json, Value};

use uvtok_core::stats::{
    binary_classification_metrics, binned_analysis, chair_scores, spearman_rho, wilcoxon_signed_rank, Alternative,
    Answer, CaptionObjects, PairedSample, DEFAULT_BINS,
};
use uvtok_core::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpearmanInput {
    x: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WilcoxonInput {
    before: Vec<f64>,
    after: Vec<f64>,
    #[serde(default = "two_sided")]
    alternative: Alternative,
}

fn two_sided() -> Alternative {
    Alternative::TwoSided
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassificationInput {
    predictions: Vec<Answer>,
    labels: Vec<Answer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BinnedInput {
    statistic: Vec<f64>,
    metrics: Vec<Vec<f64>>,
    #[serde(default)]
    metric_names: Vec<String>,
    #[serde(default = "default_bins")]
    n_bins: usize,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("bad input JSON: {e}")))
}

/// Output of one `stats` invocation: a JSON value plus, for binning, CSV.
pub struct StatsOutput {
    pub json: Value,
    pub csv: Option<String>,
}

/// Runs `test` (`spearman`, `wilcoxon`, `chair`, `classification`, `binned`)
/// on a JSON document.
pub fn run_stats(test: &str, input: &str) -> Result<StatsOutput> {
    let json = |v: Value| Ok(StatsOutput { json: v, csv: None });
    match test {
        "spearman" => {
            let i: SpearmanInput = parse(input)?;
            json(json!(spearman_rho(&i.x, &i.y)?))
        }
        "wilcoxon" => {
            let i: WilcoxonInput = parse(input)?;
            json(json!(wilcoxon_signed_rank(&PairedSample::new(i.before, i.after)?, i.alternative)?))
        }
        "chair" => {
            let captions: Vec<CaptionObjects> = parse(input)?;
            json(json!(chair_scores(&captions)?))
        }
        "classification" => {
            let i: ClassificationInput = parse(input)?;
            json(json!(binary_classification_metrics(&i.predictions, &i.labels)?))
        }
        "binned" => {
            let i: BinnedInput = parse(input)?;
            let report = binned_analysis(&i.statistic, &i.metrics, i.n_bins)?;
            let names: Vec<&str> = i.metric_names.iter().map(String::as_str).collect();
            let csv = report.to_csv(&names);
            Ok(StatsOutput { json: json!(report), csv: Some(csv) })
        }
        other => Err(Error::Config(format!("unknown statistic {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_from_json() {
        let out = run_stats("spearman", r#"{"x":[1,2,3,4],"y":[1,3,2,4]}"#).unwrap();
        assert_eq!(out.json["rho"], json!(0.8));
    }

    #[test]
    fn wilcoxon_alternative_field() {
        let out = run_stats("wilcoxon", r#"{"before":[3,4,5],"after":[0,0,0],"alternative":"greater"}"#).unwrap();
        assert_eq!(out.json["p_value"], json!(0.125));
        assert_eq!(out.json["method"], json!("exact"));
    }

    #[test]
    fn chair_and_classification() {
        let c = run_stats(
            "chair",
            r#"[{"mentioned":["a","b"],"hallucinated":["b"]},{"mentioned":["c"],"hallucinated":[]}]"#,
        )
        .unwrap();
        assert_eq!(c.json["chair_s"], json!(0.5));
        let m = run_stats("classification", r#"{"predictions":["no","no"],"labels":["yes","no"]}"#).unwrap();
        assert_eq!(m.json["precision"], Value::Null);
        assert_eq!(m.json["recall"], json!(0.0));
    }

    #[test]
    fn bad_input_is_config_error() {
        assert!(matches!(run_stats("spearman", r#"{"x":[1]}"#), Err(Error::Config(_))));
        assert!(matches!(run_stats("spearman", r#"{"x":[1,2,3],"y":[1,2,3],"z":0}"#), Err(Error::Config(_))));
        assert!(matches!(run_stats("kendall", "{}"), Err(Error::Config(_))));
    }

    #[test]
    fn binned_emits_csv() {
        let out = run_stats(
            "binned",
            r#"{"statistic":[1,2,3,4],"metrics":[[1],[2],[3],[4]],"metric_names":["chair_i"],"n_bins":2}"#,
        )
        .unwrap();
        assert!(out.csv.unwrap().starts_with("bin,lower,upper,count,statistic_mean,chair_i\n"));
    }
}
