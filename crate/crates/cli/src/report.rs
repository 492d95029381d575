//! Merging evaluation CSVs into one comparison document. Every row keeps
//! its provenance (file + line) so duplicate conflicts and parse failures
//! point at exact locations; the method label is the CSV file stem.

use cpgc_core::error::{Error, Result};
use cpgc_core::eval::CSV_HEADER;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct MergedRow {
    pub method: String,
    pub file: PathBuf,
    /// 1-based line in the source CSV (header is line 1).
    pub line: usize,
    pub surrogate: String,
    pub target: String,
    pub task: String,
    pub k: usize,
    pub clean_recall: f64,
    pub adv_recall: f64,
    pub asr: f64,
    pub d_rel: f64,
    pub defense: String,
    pub domain_pair: String,
    pub samples: usize,
    /// Verbatim CSV line; identical duplicates merge, differing ones error.
    raw: String,
}

fn row_error(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg }
}

fn parse_row(path: &Path, line_no: usize, method: &str, line: &str) -> Result<MergedRow> {
    let fields: Vec<&str> = line.split(',').collect();
    let want = CSV_HEADER.split(',').count();
    if fields.len() != want {
        return Err(row_error(
            path,
            line_no,
            format!("expected {want} fields, got {}", fields.len()),
        ));
    }
    let num = |idx: usize, name: &str| -> Result<f64> {
        fields[idx]
            .parse::<f64>()
            .map_err(|_| row_error(path, line_no, format!("bad {name} {:?}", fields[idx])))
    };
    let int = |idx: usize, name: &str| -> Result<usize> {
        fields[idx]
            .parse::<usize>()
            .map_err(|_| row_error(path, line_no, format!("bad {name} {:?}", fields[idx])))
    };
    if !matches!(fields[2], "TR" | "IR") {
        return Err(row_error(path, line_no, format!("bad task {:?}", fields[2])));
    }
    Ok(MergedRow {
        method: method.to_string(),
        file: path.to_path_buf(),
        line: line_no,
        surrogate: fields[0].to_string(),
        target: fields[1].to_string(),
        task: fields[2].to_string(),
        k: int(3, "k")?,
        clean_recall: num(4, "clean_recall")?,
        adv_recall: num(5, "adv_recall")?,
        asr: num(6, "asr")?,
        d_rel: num(7, "d_rel")?,
        defense: fields[8].to_string(),
        domain_pair: fields[13].to_string(),
        samples: int(14, "samples")?,
        raw: line.to_string(),
    })
}

/// Parses and merges evaluation CSVs. Identical duplicate rows collapse;
/// rows agreeing on every key but differing in values are a conflict named
/// by both provenances.
pub fn merge_csvs(files: &[PathBuf]) -> Result<Vec<MergedRow>> {
    let mut rows: Vec<MergedRow> = Vec::new();
    let mut seen: HashMap<(String, String, String, String, usize, String, String), usize> =
        HashMap::new();
    for path in files {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let method = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| row_error(path, 0, "unreadable file name".into()))?
            .to_string();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == CSV_HEADER => {}
            Some((_, header)) => {
                return Err(row_error(path, 1, format!("unexpected header {header:?}")))
            }
            None => return Err(row_error(path, 1, "empty file".into())),
        }
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let row = parse_row(path, idx + 1, &method, line)?;
            let key = (
                row.method.clone(),
                row.surrogate.clone(),
                row.target.clone(),
                row.task.clone(),
                row.k,
                row.defense.clone(),
                row.domain_pair.clone(),
            );
            match seen.get(&key) {
                Some(&prev_idx) => {
                    let prev = &rows[prev_idx];
                    if prev.raw != row.raw {
                        return Err(Error::Contract(format!(
                            "conflicting rows for {}/{}/{}/{}@{}: {}:{} vs {}:{}",
                            row.method,
                            row.target,
                            row.task,
                            row.defense,
                            row.k,
                            prev.file.display(),
                            prev.line,
                            row.file.display(),
                            row.line,
                        )));
                    }
                }
                None => {
                    seen.insert(key, rows.len());
                    rows.push(row);
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.domain_pair, &a.defense, &a.method, &a.target, &a.task, a.k).cmp(&(
            &b.domain_pair,
            &b.defense,
            &b.method,
            &b.target,
            &b.task,
            b.k,
        ))
    });
    Ok(rows)
}

/// Values reported for this method at full scale (public dual encoders,
/// real photo-caption benchmarks). Annotations only — desk-scale synthetic
/// runs are expected to land below them, and nothing here is a threshold.
const REFERENCE_NOTE: &str = "\
Full-scale reference (annotation, not a threshold): at full scale — public \
vision-language dual encoders, real photo-caption retrieval benchmarks — \
this attack's reported white-box ASR@1 reaches about 0.90 (TR) / 0.89 (IR) \
on its strongest victim, and black-box transfer peaks near 0.73 IR ASR@1 \
between related victims. Desk-scale runs on the synthetic corpus sit below \
those numbers; the direction of the comparisons (method vs. baselines, \
white-box vs. transfer) is what carries over, not the magnitudes.";

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.3}"))
}

/// Renders the merged rows as a markdown document: per (domain, defense)
/// group, a method-by-target ASR table at the smallest k plus a d_rel
/// table, with the full-scale reference appended as an annotation.
pub fn render_report(rows: &[MergedRow]) -> String {
    let mut out = String::from("# Universal perturbation comparison\n\n");
    let _ = writeln!(out, "Merged rows: {}.\n", rows.len());

    let mut groups: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.domain_pair.clone(), r.defense.clone()))
        .collect();
    groups.sort();
    groups.dedup();

    for (domain_pair, defense) in &groups {
        let in_group: Vec<&MergedRow> = rows
            .iter()
            .filter(|r| &r.domain_pair == domain_pair && &r.defense == defense)
            .collect();
        let k = in_group.iter().map(|r| r.k).min().expect("group is non-empty");
        let mut methods: Vec<&str> = in_group.iter().map(|r| r.method.as_str()).collect();
        methods.sort();
        methods.dedup();
        let mut targets: Vec<&str> = in_group.iter().map(|r| r.target.as_str()).collect();
        targets.sort();
        targets.dedup();

        let _ = writeln!(
            out,
            "## ASR@{k} — domains {domain_pair}, defense {defense}\n"
        );
        let mut header = String::from("| method |");
        let mut rule = String::from("|---|");
        for t in &targets {
            let wb = in_group.iter().any(|r| &r.target == t && r.surrogate == *t);
            let mark = if wb { " (white-box)" } else { "" };
            let _ = write!(header, " {t}{mark} TR | {t}{mark} IR |");
            rule.push_str("---|---|");
        }
        out.push_str(&header);
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "| {m} |");
            for t in &targets {
                for task in ["TR", "IR"] {
                    let cell = in_group
                        .iter()
                        .find(|r| &r.method == m && &r.target == t && r.task == task && r.k == k)
                        .map(|r| r.asr);
                    let _ = write!(out, " {} |", fmt_cell(cell));
                }
            }
            out.push('\n');
        }
        out.push('\n');

        let _ = writeln!(out, "Relative embedding-distance shift (d_rel):\n");
        let mut header = String::from("| method |");
        let mut rule = String::from("|---|");
        for t in &targets {
            let _ = write!(header, " {t} |");
            rule.push_str("---|");
        }
        out.push_str(&header);
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "| {m} |");
            for t in &targets {
                let cell = in_group
                    .iter()
                    .find(|r| &r.method == m && &r.target == t)
                    .map(|r| r.d_rel);
                let _ = write!(out, " {} |", fmt_cell(cell));
            }
            out.push('\n');
        }
        out.push('\n');
    }

    out.push_str(REFERENCE_NOTE);
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(dir: &Path, name: &str, rows: &[&str]) -> PathBuf {
        let path = dir.join(name);
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&path, text).unwrap();
        path
    }

    const ROW_A: &str = "mp_s1,mp_s1,TR,1,0.9,0.4,0.55,0.2,none,false,false,false,false,A->A,16";
    const ROW_B: &str = "mp_s1,mx_s2,IR,1,0.8,0.6,0.25,0.1,none,false,false,false,false,A->A,16";

    #[test]
    fn single_file_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "full.csv", &[ROW_A, ROW_B]);
        let rows = merge_csvs(&[p]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.method == "full"));
        let doc = render_report(&rows);
        assert!(doc.contains("| full |"), "{doc}");
        assert!(doc.contains("mp_s1 (white-box)"), "{doc}");
        assert!(doc.contains("annotation, not a threshold"), "{doc}");
    }

    #[test]
    fn malformed_row_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "full.csv", &[ROW_A, "mp_s1,mp_s1,TR,oops"]);
        let err = merge_csvs(&[p]).unwrap_err().to_string();
        assert!(err.contains("full.csv") && err.contains('3'), "{err}");
        let p2 = write_csv(
            dir.path(),
            "bad_num.csv",
            &["mp_s1,mp_s1,TR,1,x,0.4,0.5,0.2,none,false,false,false,false,A->A,16"],
        );
        let err = merge_csvs(&[p2]).unwrap_err().to_string();
        assert!(err.contains("clean_recall") && err.contains('2'), "{err}");
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.csv");
        fs::write(&path, "surrogate,target\nx,y\n").unwrap();
        let err = merge_csvs(&[path]).unwrap_err().to_string();
        assert!(err.contains("unexpected header"), "{err}");
    }

    #[test]
    fn identical_duplicates_collapse_but_conflicts_error() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = write_csv(dir.path(), "full.csv", &[ROW_A]);
        // Same method label requires the same stem: a copy in another dir.
        let sub = dir.path().join("again");
        fs::create_dir(&sub).unwrap();
        let p2b = write_csv(&sub, "full.csv", &[ROW_A]);
        let rows = merge_csvs(&[p1.clone(), p2b]).unwrap();
        assert_eq!(rows.len(), 1);

        let conflicting = ROW_A.replace("0.55", "0.60");
        let sub2 = dir.path().join("conflict");
        fs::create_dir(&sub2).unwrap();
        let p3 = write_csv(&sub2, "full.csv", &[&conflicting]);
        let err = merge_csvs(&[p1, p3]).unwrap_err().to_string();
        assert!(err.contains("conflicting rows"), "{err}");
        assert!(err.contains("full.csv:2"), "{err}");
        assert!(err.contains("conflict"), "{err}");
    }

    #[test]
    fn methods_merge_into_one_table() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = write_csv(dir.path(), "full.csv", &[ROW_A]);
        let row_gap = ROW_A.replace("0.55", "0.30");
        let p2 = write_csv(dir.path(), "gap.csv", &[&row_gap]);
        let rows = merge_csvs(&[p1, p2]).unwrap();
        let doc = render_report(&rows);
        assert!(doc.contains("| full |") && doc.contains("| gap |"), "{doc}");
        assert!(doc.contains("0.550") && doc.contains("0.300"), "{doc}");
    }
}
