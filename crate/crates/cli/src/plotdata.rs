//! Long-format `(series, x, y)` tables for external plotting, one file per
//! figure recipe, derived from the tables of a finished run.

use crate::error::CliError;
use crate::output::{read_table, Table};
use crate::run::read_manifest;
use std::path::Path;

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::MissingArtifact(format!("{}: no column '{name}'", path.display())))
}

/// One series per distinct value of `by`, with `x` and `y` columns.
fn series_by(dir: &Path, file: &str, by: &str, label: &str, x: &str, y: &str) -> Result<Table, CliError> {
    let path = dir.join(file);
    let (header, rows) = read_table(&path)?;
    let (ib, ix, iy) = (column(&header, by, &path)?, column(&header, x, &path)?, column(&header, y, &path)?);
    let mut t = Table::new(&["series", "x", "y"]);
    for r in rows {
        t.push(vec![format!("{label}={}", r[ib]).into(), r[ix].clone().into(), r[iy].clone().into()]);
    }
    Ok(t)
}

/// One series per named column, against the shared `x` column.
fn series_of_columns(dir: &Path, file: &str, x: &str, ys: &[&str], ci: Option<&str>) -> Result<Table, CliError> {
    let path = dir.join(file);
    let (header, rows) = read_table(&path)?;
    let ix = column(&header, x, &path)?;
    let ic = ci.map(|c| column(&header, c, &path)).transpose()?;
    let mut t = if ic.is_some() { Table::new(&["series", "x", "y", "ci"]) } else { Table::new(&["series", "x", "y"]) };
    for name in ys {
        let iy = column(&header, name, &path)?;
        for r in &rows {
            let mut row = vec![(*name).into(), r[ix].clone().into(), r[iy].clone().into()];
            if let Some(ic) = ic {
                row.push(r[ic].clone().into());
            }
            t.push(row);
        }
    }
    Ok(t)
}

/// Writes the figure tables for the run in `dir` and returns their names.
pub fn emit_plotdata(dir: &Path) -> Result<Vec<String>, CliError> {
    let manifest = read_manifest(dir)?;
    let kind = manifest
        .iter()
        .find(|(k, _)| k == "kind")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| CliError::MissingArtifact(format!("{}: manifest has no kind", dir.display())))?;
    let mut out: Vec<(&str, Table)> = vec![];
    match kind.as_str() {
        "bshj" => out.push(("plot_value_snapshots.csv", series_by(dir, "u_epoch.csv", "t", "t", "x", "u")?)),
        "deterministic_mfg" | "stochastic_mfg" => {
            out.push(("plot_value_snapshots.csv", series_by(dir, "u_epoch.csv", "t", "t", "x", "u")?));
            out.push(("plot_density_evolution.csv", series_by(dir, "m_epoch.csv", "t", "t", "x", "m")?));
        }
        "convergence" => {
            out.push(("plot_gaps_vs_n.csv", series_of_columns(dir, "convergence.csv", "n_coarse", &["coupling_gap", "cauchy_gap"], None)?))
        }
        "nplayer" => out.push(("plot_nash_vs_n.csv", series_of_columns(dir, "nash.csv", "n_players", &["epsilon"], Some("ci"))?)),
        "filippov" => out.push(("plot_density_profiles.csv", series_by(dir, "density.csv", "t", "t", "x", "m")?)),
        "acceptance" => {}
        other => return Err(CliError::MissingArtifact(format!("no figure recipe for kind '{other}'"))),
    }
    let mut names = vec![];
    for (name, t) in out {
        t.write(&dir.join(name))?;
        names.push(name.to_string());
    }
    Ok(names)
}
