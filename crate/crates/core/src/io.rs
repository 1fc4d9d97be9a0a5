//! CSV dumps of particle arrays and JSON reports.
//!
//! Rows run over `(step, particle)`. Controls, `Q` and `R` live on the `steps` intervals
//! only, so their cells are left empty on the terminal row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::adjoint::AdjointEnsemble;
use crate::array::Cube;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::sensitivity::PinnedFlow;
use crate::simulate::ParticleEnsemble;

fn names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}_{i}")).collect()
}

/// `Q` column names: `q_i_j` is row `i` of diffusion column `j`.
fn q_names(n: usize) -> Vec<String> {
    (1..=n).flat_map(|j| (1..=n).map(move |i| format!("q_{i}_{j}"))).collect()
}

/// `R` column names: `r_a_i` is coordinate `i` for jump atom `a`.
fn r_names(n: usize, atoms: usize) -> Vec<String> {
    (1..=atoms).flat_map(|a| (1..=n).map(move |i| format!("r_{a}_{i}"))).collect()
}

fn push_row(out: &mut Vec<String>, cube: &Cube, k: usize, i: usize, width: usize) {
    if k < cube.times() {
        out.extend(cube.at(k, i).iter().map(|v| v.to_string()));
    } else {
        out.extend(std::iter::repeat(String::new()).take(width));
    }
}

/// Writes `columns` for every `(step, particle)`, optionally led by a tag value.
fn write_rows(
    path: &Path,
    grid: &TimeGrid,
    tags: Option<&[f64]>,
    cubes: &[(&Cube, Vec<String>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<String> = Vec::new();
    if tags.is_some() {
        header.push("tag".into());
    }
    header.extend(["step", "time", "particle"].map(String::from));
    for (_, cols) in cubes {
        header.extend(cols.iter().cloned());
    }
    w.write_record(&header)?;
    let count = cubes.first().map_or(0, |(c, _)| c.particles());
    let mut row = Vec::with_capacity(header.len());
    for k in 0..grid.knots() {
        for i in 0..count {
            row.clear();
            if let Some(t) = tags {
                row.push(t[i].to_string());
            }
            row.extend([k.to_string(), grid.time(k).to_string(), i.to_string()]);
            for (cube, cols) in cubes {
                push_row(&mut row, cube, k, i, cols.len());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `step,time,particle,x_1..x_n,v_1..v_d`
pub fn write_ensemble_csv(path: &Path, ens: &ParticleEnsemble) -> Result<()> {
    write_rows(
        path,
        &ens.grid,
        None,
        &[(&ens.states, names("x", ens.states.width())), (&ens.controls, names("v", ens.controls.width()))],
    )
}

/// `step,time,particle,p_1..p_n,q_i_j..,r_a_i..`
pub fn write_adjoint_csv(path: &Path, adj: &AdjointEnsemble, atoms: usize) -> Result<()> {
    let n = adj.p.width();
    write_rows(path, &adj.grid, None, &[(&adj.p, names("p", n)), (&adj.q, q_names(n)), (&adj.r, r_names(n, atoms))])
}

/// Pinned trajectories in the ensemble layout, led by a `tag` column; the tag of a
/// row is the index of its probe and `particle` repeats it.
pub fn write_pinned_csv(path: &Path, flow: &PinnedFlow) -> Result<()> {
    let tags: Vec<f64> = (0..flow.len()).map(|m| m as f64).collect();
    write_rows(
        path,
        &flow.grid,
        Some(&tags),
        &[(&flow.states, names("x", flow.states.width())), (&flow.controls, names("v", flow.controls.width()))],
    )
}

/// Pinned adjoints in the adjoint layout, led by a `tag` column.
pub fn write_pinned_adjoint_csv(path: &Path, flow: &PinnedFlow, atoms: usize) -> Result<()> {
    let n = flow.p.width();
    let tags: Vec<f64> = (0..flow.len()).map(|m| m as f64).collect();
    write_rows(
        path,
        &flow.grid,
        Some(&tags),
        &[(&flow.p, names("p", n)), (&flow.q, q_names(n)), (&flow.r, r_names(n, atoms))],
    )
}

/// Reads a point cloud from a CSV file with a header line and one point per row.
pub fn read_measure_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len();
    let mut points = Vec::new();
    for (row, rec) in r.records().enumerate() {
        for (col, field) in rec?.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::domain(format!("{}: row {} column {} is not a number", path.display(), row + 1, col + 1)))?;
            points.push(v);
        }
    }
    EmpiricalMeasure::new(dim, points)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::lqoracle::LqSpec;
    use crate::solver::{solve_mftc, SolveConfig};

    #[test]
    fn ensemble_and_adjoint_layouts() {
        let spec = LqSpec::fixture_with_jump();
        let model = spec.model().unwrap();
        let jm = spec.jump_measure().unwrap();
        let init = EmpiricalMeasure::sample_gaussian(4, &[0.0], &[1.0], 1).unwrap();
        let cfg = SolveConfig { steps: 3, exec: Exec::Sequential, ..Default::default() };
        let sol = solve_mftc(&model, &jm, &init, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.csv");
        write_ensemble_csv(&path, &sol.ensemble).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,time,particle,x_1,v_1");
        assert_eq!(lines.len(), 1 + 4 * 4);
        assert!(lines.last().unwrap().ends_with(','));
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[3].parse::<f64>().unwrap(), init.point(0)[0]);

        let path = dir.path().join("adjoint.csv");
        write_adjoint_csv(&path, &sol.adjoint, jm.len()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,time,particle,p_1,q_1_1,r_1_1\n"));
    }

    #[test]
    fn measure_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mu.csv");
        std::fs::write(&path, "x_1,x_2\n1.0,2.0\n-0.5,3\n").unwrap();
        let mu = read_measure_csv(&path).unwrap();
        assert_eq!((mu.dim(), mu.points()), (2, &[1.0, 2.0, -0.5, 3.0][..]));
        std::fs::write(&path, "x_1\nfoo\n").unwrap();
        assert!(read_measure_csv(&path).is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_json(&path, &vec![1.5, -2.0]).unwrap();
        let back: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, vec![1.5, -2.0]);
    }
}
