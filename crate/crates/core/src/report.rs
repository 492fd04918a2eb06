//! Baseline-versus-retrieval comparison tables from run summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

pub const OUT_OF_SCOPE: &str = "Not reproduced here: WikiText-103 perplexity (Table 2), question-answering metrics (Table 3), \
needle-in-a-haystack retrieval (Table 9) and lm-evaluation-harness scores (Tables 10-11). \
These need pretrained models and corpora beyond a desk-scale synthetic setup.";

/// One finished run, as written in the final line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub len: usize,
    pub pairs: usize,
    pub d_model: usize,
    pub variant: String,
    pub seed: u64,
    pub slot_acc: f64,
    pub exact: f64,
    /// Task configuration; runs joined into one row must agree on it.
    pub task_config: Value,
}

const REQUIRED: [&str; 9] = ["task", "len", "pairs", "d_model", "variant", "seed", "slot_acc", "exact", "task_config"];

/// Reads the last `"kind": "summary"` record of a line-delimited file.
pub fn parse_summary(source: &str, text: &str) -> Result<RunSummary> {
    let mut found = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{source}: {e}"),
        })?;
        if v.get("kind").and_then(Value::as_str) == Some("summary") {
            found = Some((i + 1, v));
        }
    }
    let (line, v) = found.ok_or_else(|| Error::Config(format!("{source}: no summary record")))?;
    for col in REQUIRED {
        if v.get(col).is_none_or(Value::is_null) {
            return Err(Error::Join(format!("{source}:{line}: summary is missing column `{col}`")));
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Parse {
        line,
        msg: format!("{source}: {e}"),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowKey {
    pub task: String,
    pub len: usize,
    pub pairs: usize,
    pub d_model: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub exact: f64,
    pub slot_acc: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub variants: Vec<String>,
    pub rows: BTreeMap<RowKey, BTreeMap<String, Cell>>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    crate::bench::median(&mut xs)
}

/// Groups runs by (task, T, P, D) and variant; seeds are reduced by
/// median.
pub fn join(runs: &[RunSummary]) -> Result<Comparison> {
    let mut configs: BTreeMap<(String, usize, usize), &Value> = BTreeMap::new();
    let mut groups: BTreeMap<RowKey, BTreeMap<String, Vec<&RunSummary>>> = BTreeMap::new();
    let mut variants: Vec<String> = Vec::new();
    for r in runs {
        let k = (r.task.clone(), r.len, r.pairs);
        match configs.get(&k) {
            Some(c) if **c != r.task_config => {
                return Err(Error::Join(format!(
                    "runs for task {} T={} P={} disagree on task config: {} vs {}",
                    r.task, r.len, r.pairs, c, r.task_config
                )))
            }
            _ => {
                configs.insert(k, &r.task_config);
            }
        }
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
        let key = RowKey {
            task: r.task.clone(),
            len: r.len,
            pairs: r.pairs,
            d_model: r.d_model,
        };
        groups.entry(key).or_default().entry(r.variant.clone()).or_default().push(r);
    }
    variants.sort_by_key(|v| (v != "baseline", v.clone()));
    let rows = groups
        .into_iter()
        .map(|(k, by)| {
            let cells = by
                .into_iter()
                .map(|(v, rs)| {
                    let cell = Cell {
                        exact: median(rs.iter().map(|r| r.exact).collect()),
                        slot_acc: median(rs.iter().map(|r| r.slot_acc).collect()),
                        runs: rs.len(),
                    };
                    (v, cell)
                })
                .collect();
            (k, cells)
        })
        .collect();
    Ok(Comparison { variants, rows })
}

impl Comparison {
    /// One row per (task, T, P, D, variant) with deltas against the
    /// baseline of the same configuration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,T,P,D,variant,runs,slot_acc,exact,delta_slot_acc,delta_exact\n");
        for (k, cells) in &self.rows {
            let base = cells.get("baseline");
            for v in &self.variants {
                let Some(c) = cells.get(v) else { continue };
                let d = |f: fn(&Cell) -> f64| base.map_or(String::new(), |b| format!("{:+.4}", f(c) - f(b)));
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{:.4},{:.4},{},{}",
                    k.task,
                    k.len,
                    k.pairs,
                    k.d_model,
                    v,
                    c.runs,
                    c.slot_acc,
                    c.exact,
                    d(|c| c.slot_acc),
                    d(|c| c.exact)
                );
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Task | T | P | D | Variant | Runs | Slot acc | Exact match | Δ slot acc | Δ exact |\n");
        s.push_str("|---|---:|---:|---:|---|---:|---:|---:|---:|---:|\n");
        for line in self.to_csv().lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let _ = writeln!(s, "| {} |", f.join(" | "));
        }
        s.push('\n');
        s.push_str(&self.grids());
        let _ = writeln!(s, "{OUT_OF_SCOPE}");
        s
    }

    /// Exact-match grids with model width down and sequence length
    /// across, one per task and variant.
    pub fn grids(&self) -> String {
        let mut s = String::new();
        let mut tasks: Vec<&str> = self.rows.keys().map(|k| k.task.as_str()).collect();
        tasks.dedup();
        for task in tasks {
            let keys: Vec<&RowKey> = self.rows.keys().filter(|k| k.task == task).collect();
            let mut lens: Vec<usize> = keys.iter().map(|k| k.len).collect();
            lens.sort_unstable();
            lens.dedup();
            let mut dims: Vec<usize> = keys.iter().map(|k| k.d_model).collect();
            dims.sort_unstable();
            dims.dedup();
            for v in &self.variants {
                let _ = writeln!(s, "**{task}, {v}: exact match by model dimension and sequence length**\n");
                let _ = write!(s, "| D \\ T |");
                for l in &lens {
                    let _ = write!(s, " {l} |");
                }
                let _ = write!(s, "\n|---:|");
                for _ in &lens {
                    s.push_str("---:|");
                }
                s.push('\n');
                for d in &dims {
                    let _ = write!(s, "| {d} |");
                    for l in &lens {
                        // several P values at one (T, D) are averaged
                        let cs: Vec<f64> = keys
                            .iter()
                            .filter(|k| k.len == *l && k.d_model == *d)
                            .filter_map(|k| self.rows[*k].get(v).map(|c| c.exact))
                            .collect();
                        if cs.is_empty() {
                            s.push_str(" - |");
                        } else {
                            let _ = write!(s, " {:.3} |", cs.iter().sum::<f64>() / cs.len() as f64);
                        }
                    }
                    s.push('\n');
                }
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: &str, exact: f64, d: usize) -> String {
        serde_json::json!({
            "kind": "summary", "task": "mqar", "len": 64, "pairs": 8, "d_model": d,
            "variant": variant, "seed": 1, "slot_acc": exact, "exact": exact,
            "task_config": {"vocab": 256}
        })
        .to_string()
    }

    #[test]
    fn two_runs_give_two_rows_with_delta() {
        let a = parse_summary("a", &format!("{{\"kind\":\"step\"}}\n{}\n", run("baseline", 0.25, 64))).unwrap();
        let b = parse_summary("b", &run("resona", 1.0, 64)).unwrap();
        let c = join(&[b, a]).unwrap();
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("delta_exact"));
        assert!(lines[1].starts_with("mqar,64,8,64,baseline"));
        assert!(lines[2].ends_with("+0.7500,+0.7500"));
        let md = c.to_markdown();
        assert!(md.contains("Table 2") && md.contains("Table 9") && md.contains("Tables 10-11"));
        assert!(md.contains("| D \\ T | 64 |"));
    }

    #[test]
    fn missing_column_is_a_join_error() {
        let mut v: Value = serde_json::from_str(&run("baseline", 0.5, 64)).unwrap();
        v.as_object_mut().unwrap().remove("exact");
        let e = parse_summary("m.jsonl", &v.to_string()).unwrap_err().to_string();
        assert!(e.contains("missing column `exact`"), "{e}");
        assert!(parse_summary("x", "{\"kind\":\"step\"}").is_err());
    }

    #[test]
    fn mismatched_task_configs_are_rejected() {
        let a = parse_summary("a", &run("baseline", 0.5, 64)).unwrap();
        let mut b = parse_summary("b", &run("resona", 0.5, 64)).unwrap();
        b.task_config = serde_json::json!({"vocab": 128});
        assert!(join(&[a, b]).unwrap_err().to_string().contains("disagree"));
    }

    #[test]
    fn seeds_reduce_by_median() {
        let runs: Vec<RunSummary> = [0.1, 0.9, 0.5].iter().map(|&e| parse_summary("r", &run("resona", e, 32)).unwrap()).collect();
        let c = join(&runs).unwrap();
        let cell = &c.rows.values().next().unwrap()["resona"];
        assert_eq!((cell.exact, cell.runs), (0.5, 3));
    }
}
