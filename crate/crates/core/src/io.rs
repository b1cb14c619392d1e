//! Field and ensemble exports: CSV for plotting, binary dumps for
//! round-tripping.
//!
//! Binary layout: the magic bytes, a little-endian `u64` header length, a
//! JSON header describing shapes, then little-endian `f64` payload arrays in
//! header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bernstein_sim::{Clock, Direction, PathEnsemble};
use crate::error::{LabError, Result};
use crate::fbsde_verifier::ResidualReport;
use crate::grid::{FieldKind, Grid, ScalarField};
use crate::stats::Histogram;

const FIELD_MAGIC: &[u8; 8] = b"BLFIELD1";
const ENSEMBLE_MAGIC: &[u8; 8] = b"BLPATHS1";

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e))
}

fn coord_headers(dim: usize) -> Vec<String> {
    (1..=dim).map(|a| format!("x{a}")).collect()
}

/// One row per node and level: `x1[,x2],t,value`.
pub fn write_field_csv(path: &Path, field: &ScalarField) -> Result<()> {
    let all: Vec<usize> = (0..field.grid.levels()).collect();
    write_field_csv_levels(path, field, &all)
}

/// Same layout restricted to the given time levels.
pub fn write_field_csv_levels(path: &Path, field: &ScalarField, levels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let grid = &field.grid;
    let d = grid.dim();
    let mut head = coord_headers(d);
    head.extend(["t".to_string(), "value".to_string()]);
    w.write_record(&head).map_err(csv_err)?;
    for &n in levels {
        let t = grid.times()[n];
        let level = field.level(n);
        for (node, v) in level.iter().enumerate() {
            let p = grid.coord(node);
            let mut row: Vec<String> = p[..d].iter().map(|x| x.to_string()).collect();
            row.push(t.to_string());
            row.push(v.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    kind: FieldKind,
    grid: Grid,
    len: usize,
}

fn write_framed(path: &Path, magic: &[u8; 8], header: &impl Serialize, arrays: &[&[f64]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let head = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(head.len() as u64).to_le_bytes())?;
    w.write_all(&head)?;
    for a in arrays {
        for v in *a {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_framed<H: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 8]) -> Result<(H, BufReader<File>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(LabError::Config(format!("{} is not a recognized dump", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut head = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut head)?;
    Ok((serde_json::from_slice(&head)?, r))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect())
}

pub fn write_field_bin(path: &Path, field: &ScalarField) -> Result<()> {
    let header = FieldHeader {
        kind: field.kind,
        grid: (*field.grid).clone(),
        len: field.values.len(),
    };
    write_framed(path, FIELD_MAGIC, &header, &[&field.values])
}

pub fn read_field_bin(path: &Path) -> Result<ScalarField> {
    let (h, mut r): (FieldHeader, _) = read_framed(path, FIELD_MAGIC)?;
    if h.len != h.grid.levels() * h.grid.node_count() {
        return Err(LabError::Mismatch("field dump length does not match its grid".into()));
    }
    let values = read_f64s(&mut r, h.len)?;
    Ok(ScalarField {
        grid: Arc::new(h.grid),
        kind: h.kind,
        values,
    })
}

/// `path,step,t,x1[,x2],dw1[,dw2]`; the increment columns are empty on the
/// last step.
pub fn write_ensemble_csv(path: &Path, ens: &PathEnsemble) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = ens.dim;
    let mut head = vec!["path".to_string(), "step".to_string(), "t".to_string()];
    head.extend(coord_headers(d));
    head.extend((1..=d).map(|a| format!("dw{a}")));
    w.write_record(&head).map_err(csv_err)?;
    let n = ens.steps();
    for p in 0..ens.n_paths {
        for k in 0..=n {
            let mut row = vec![p.to_string(), k.to_string(), ens.times[k].to_string()];
            row.extend(ens.state(p, k).iter().map(|x| x.to_string()));
            if k < n {
                row.extend(ens.increment(p, k).iter().map(|x| x.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    direction: Direction,
    dim: usize,
    n_paths: usize,
    dt: f64,
    seed: u64,
    clock: Clock,
    steps: usize,
}

pub fn write_ensemble_bin(path: &Path, ens: &PathEnsemble) -> Result<()> {
    let header = EnsembleHeader {
        direction: ens.direction,
        dim: ens.dim,
        n_paths: ens.n_paths,
        dt: ens.dt,
        seed: ens.seed,
        clock: ens.clock.clone(),
        steps: ens.steps(),
    };
    write_framed(
        path,
        ENSEMBLE_MAGIC,
        &header,
        &[&ens.times, &ens.states, &ens.increments, &ens.reflections],
    )
}

pub fn read_ensemble_bin(path: &Path) -> Result<PathEnsemble> {
    let (h, mut r): (EnsembleHeader, _) = read_framed(path, ENSEMBLE_MAGIC)?;
    let (n, d, np) = (h.steps, h.dim, h.n_paths);
    let times = read_f64s(&mut r, n + 1)?;
    let states = read_f64s(&mut r, np * (n + 1) * d)?;
    let increments = read_f64s(&mut r, np * n * d)?;
    let reflections = read_f64s(&mut r, np * n * d)?;
    Ok(PathEnsemble {
        direction: h.direction,
        dim: d,
        n_paths: np,
        dt: h.dt,
        seed: h.seed,
        times,
        states,
        increments,
        reflections,
        clock: h.clock,
    })
}

/// `lower,upper,count`
pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["lower", "upper", "count"]).map_err(csv_err)?;
    let e = hist.edges();
    for (i, c) in hist.counts.iter().enumerate() {
        w.write_record([e[i].to_string(), e[i + 1].to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `t,mean1[,mean2],sem1[,sem2],mean_square,max_abs`
pub fn write_residual_profile_csv(path: &Path, report: &ResidualReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = report.levels.first().map(|l| l.mean.len()).unwrap_or(1);
    let mut head = vec!["t".to_string()];
    head.extend((1..=d).map(|a| format!("mean{a}")));
    head.extend((1..=d).map(|a| format!("sem{a}")));
    head.extend(["mean_square".to_string(), "max_abs".to_string()]);
    w.write_record(&head).map_err(csv_err)?;
    let mut levels: Vec<_> = report.levels.iter().collect();
    levels.sort_by(|a, b| a.t.total_cmp(&b.t));
    for l in levels {
        let mut row = vec![l.t.to_string()];
        row.extend(l.mean.iter().map(|v| v.to_string()));
        row.extend(l.sem.iter().map(|v| v.to_string()));
        row.push(l.mean_square.to_string());
        row.push(l.max_abs.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Generic table writer for plot data.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(LabError::Mismatch("row width does not match header".into()));
        }
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
