//! Result tables: a CSV with one row per report, and Markdown shaped like the
//! printed tables (rows are train/test cells, columns are features).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalReport};
use crate::filterbanks::FeatureKind;

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    experiment: String,
    group: String,
    label: String,
    cell: String,
    train: String,
    test: String,
    feature: String,
    n: usize,
    mean: String,
    std: String,
    seeds: String,
    values: String,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// Serializes reports to CSV bytes. Floats use the shortest round-trip form.
pub fn to_csv(reports: &[EvalReport]) -> Result<Vec<u8>, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            experiment: r.experiment.clone(),
            group: r.group.clone(),
            label: r.label.clone(),
            cell: r.cell.clone(),
            train: r.train.clone(),
            test: r.test.clone(),
            feature: r.feature.name().into(),
            n: r.values.len(),
            mean: r.mean.to_string(),
            std: r.std.to_string(),
            seeds: join(&r.seeds),
            values: join(&r.values),
        })?;
    }
    w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
}

pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, to_csv(reports)?)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, EvalError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse().map_err(|_| EvalError::Descriptor(format!("bad list entry `{x}`"))))
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalReport>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row?;
        let feature: FeatureKind = row
            .feature
            .parse()
            .map_err(|e: crate::filterbanks::FilterBankError| EvalError::Descriptor(e.to_string()))?;
        out.push(EvalReport::new(
            &row.experiment,
            &row.group,
            &row.label,
            &row.cell,
            &row.train,
            &row.test,
            feature,
            parse_list(&row.seeds)?,
            parse_list(&row.values)?,
        ));
    }
    Ok(out)
}

/// Markdown table per experiment. The best mean in each row is bold.
pub fn to_markdown(reports: &[EvalReport]) -> String {
    let mut experiments: Vec<&str> = Vec::new();
    for r in reports {
        if !experiments.contains(&r.experiment.as_str()) {
            experiments.push(&r.experiment);
        }
    }
    let mut out = String::new();
    for exp in experiments {
        let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.experiment == exp).collect();
        let features: Vec<FeatureKind> = FeatureKind::ALL
            .into_iter()
            .filter(|f| rs.iter().any(|r| r.feature == *f))
            .collect();
        // rows grouped by group, in order of first appearance
        let mut groups: Vec<&str> = Vec::new();
        let mut rows: Vec<(&str, &str)> = Vec::new();
        let mut cells: BTreeMap<(&str, &str, FeatureKind), &EvalReport> = BTreeMap::new();
        for r in &rs {
            if !groups.contains(&r.group.as_str()) {
                groups.push(&r.group);
            }
            if !rows.contains(&(r.group.as_str(), r.label.as_str())) {
                rows.push((&r.group, &r.label));
            }
            cells.insert((&r.group, &r.label, r.feature), r);
        }
        let _ = writeln!(out, "## {exp}\n");
        let _ = write!(out, "| train set | test set |");
        for f in &features {
            let _ = write!(out, " {} |", f.name());
        }
        let _ = write!(out, "\n|---|---|");
        for _ in &features {
            let _ = write!(out, "---|");
        }
        out.push('\n');
        for g in &groups {
            for (i, (_, label)) in rows.iter().filter(|(rg, _)| rg == g).enumerate() {
                let best = features
                    .iter()
                    .filter_map(|f| cells.get(&(*g, *label, *f)).map(|r| r.mean))
                    .fold(f64::NEG_INFINITY, f64::max);
                let _ = write!(out, "| {} | {} |", if i == 0 { *g } else { "" }, label);
                for f in &features {
                    match cells.get(&(*g, *label, *f)) {
                        Some(r) => {
                            let text = format!("{:.3} ± {:.3}", r.mean, r.std);
                            if r.mean == best && features.len() > 1 {
                                let _ = write!(out, " **{text}** |");
                            } else {
                                let _ = write!(out, " {text} |");
                            }
                        }
                        None => {
                            let _ = write!(out, " n/a |");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}
