//! Fixed-column CSV tables ('.' decimal separator, '\n' line endings).
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! parses back to the identical bits and reruns of a deterministic pipeline
//! produce byte-identical files.

use crate::error::{Error, Result};
use crate::synth::Split;
use crate::uncertainty::{ScoreRow, UeScores};
use std::path::Path;

pub const SCORE_HEADER: &str =
    "id,conf_raw,ent_raw,mi_raw,epkl_raw,conf_n,ent_n,mi_n,epkl_n,u_tot,rank,flagged,pred_dice,true_dice";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::format(path, format!("line {line}: bad float '{field}'")))
}

fn parse_opt_f64(field: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, path, line).map(Some)
    }
}

pub fn write_score_table(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut text = String::from(SCORE_HEADER);
    text.push('\n');
    for r in rows {
        let norm = r.norm;
        let line = [
            r.id.clone(),
            r.raw.confidence.to_string(),
            r.raw.entropy.to_string(),
            r.raw.mi.to_string(),
            r.raw.epkl.to_string(),
            fmt_opt(norm.map(|n| n.confidence)),
            fmt_opt(norm.map(|n| n.entropy)),
            fmt_opt(norm.map(|n| n.mi)),
            fmt_opt(norm.map(|n| n.epkl)),
            fmt_opt(r.u_tot),
            r.rank.map(|v| v.to_string()).unwrap_or_default(),
            if r.flagged { "1" } else { "0" }.to_string(),
            fmt_opt(r.pred_dice),
            fmt_opt(r.true_dice),
        ]
        .join(",");
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORE_HEADER => {}
        _ => return Err(Error::format(path, "missing or wrong score-table header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::format(
                path,
                format!("line {lineno}: expected 14 columns, got {}", f.len()),
            ));
        }
        let raw = UeScores {
            confidence: parse_f64(f[1], path, lineno)?,
            entropy: parse_f64(f[2], path, lineno)?,
            mi: parse_f64(f[3], path, lineno)?,
            epkl: parse_f64(f[4], path, lineno)?,
        };
        let norm_fields = [
            parse_opt_f64(f[5], path, lineno)?,
            parse_opt_f64(f[6], path, lineno)?,
            parse_opt_f64(f[7], path, lineno)?,
            parse_opt_f64(f[8], path, lineno)?,
        ];
        let norm = match norm_fields {
            [Some(c), Some(e), Some(m), Some(k)] => Some(UeScores {
                confidence: c,
                entropy: e,
                mi: m,
                epkl: k,
            }),
            [None, None, None, None] => None,
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: partially filled normalized columns"),
                ))
            }
        };
        let rank = if f[10].is_empty() {
            None
        } else {
            Some(f[10].parse::<usize>().map_err(|_| {
                Error::format(path, format!("line {lineno}: bad rank '{}'", f[10]))
            })?)
        };
        let flagged = match f[11] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: bad flagged value '{other}'"),
                ))
            }
        };
        rows.push(ScoreRow {
            id: f[0].to_string(),
            raw,
            norm,
            u_tot: parse_opt_f64(f[9], path, lineno)?,
            rank,
            flagged,
            pred_dice: parse_opt_f64(f[12], path, lineno)?,
            true_dice: parse_opt_f64(f[13], path, lineno)?,
        });
    }
    Ok(rows)
}

/// One corpus-manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub is_ambiguous: bool,
    pub split: Split,
}

pub const MANIFEST_HEADER: &str = "id,is_ambiguous,split";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{}\n",
            r.id,
            r.is_ambiguous as u8,
            r.split.as_str()
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::format(path, "missing or wrong manifest header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 columns", i + 1),
            ));
        }
        let split = match f[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::format(
                    path,
                    format!("line {}: bad split '{other}'", i + 1),
                ))
            }
        };
        rows.push(ManifestRow {
            id: f[0].to_string(),
            is_ambiguous: f[1] == "1",
            split,
        });
    }
    Ok(rows)
}

/// One stack-metadata row: member provenance for a persisted sample stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackMetaRow {
    pub id: String,
    pub member: usize,
    pub kind: String,
    pub seed: Option<u64>,
    pub angle_deg: Option<f64>,
}

pub const STACK_META_HEADER: &str = "id,member,kind,seed,angle_deg";

pub fn write_stack_meta(path: &Path, rows: &[StackMetaRow]) -> Result<()> {
    let mut text = String::from(STACK_META_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.member,
            r.kind,
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.angle_deg.map(|a| a.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_stack_meta(path: &Path) -> Result<Vec<StackMetaRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == STACK_META_HEADER => {}
        _ => return Err(Error::format(path, "missing or wrong stack-meta header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::format(
                path,
                format!("line {lineno}: expected 5 columns"),
            ));
        }
        rows.push(StackMetaRow {
            id: f[0].to_string(),
            member: f[1]
                .parse()
                .map_err(|_| Error::format(path, format!("line {lineno}: bad member index")))?,
            kind: f[2].to_string(),
            seed: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(|_| {
                    Error::format(path, format!("line {lineno}: bad seed '{}'", f[3]))
                })?)
            },
            angle_deg: parse_opt_f64(f[4], path, lineno)?,
        });
    }
    Ok(rows)
}

/// True-vs-predicted Dice pairs behind the scatter plots.
pub const SCATTER_HEADER: &str = "id,true_dice,pred_dice";

pub fn write_scatter(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut text = String::from(SCATTER_HEADER);
    text.push('\n');
    for (id, t, p) in rows {
        text.push_str(&format!("{id},{t},{p}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scatter(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCATTER_HEADER => {}
        _ => return Err(Error::format(path, "missing or wrong scatter header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 columns", i + 1),
            ));
        }
        rows.push((
            f[0].to_string(),
            parse_f64(f[1], path, i + 1)?,
            parse_f64(f[2], path, i + 1)?,
        ));
    }
    Ok(rows)
}
