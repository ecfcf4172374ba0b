//! File output: JSON-lines snapshots, CSV diagnostics and SVG frames.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CurveError, Result};
use crate::flow::RunObserver;
use crate::grid::CurveState;
use crate::monitor::{DiagnosticsRecord, CSV_HEADER};

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    t: f64,
    n: usize,
    #[serde(rename = "N")]
    nodes_count: usize,
    nodes: Vec<Vec<f64>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CurveError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CurveError::io(path, e))
}

/// Appends one JSON object per snapshot.
pub struct SnapshotWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl SnapshotWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let out = create(&path)?;
        Ok(SnapshotWriter { path, out })
    }

    pub fn write(&mut self, state: &CurveState) -> Result<()> {
        let line = SnapshotLine {
            t: state.t,
            n: state.dim(),
            nodes_count: state.nodes(),
            nodes: state.points().to_points(),
        };
        serde_json::to_writer(&mut self.out, &line)
            .map_err(|e| CurveError::io(&self.path, e.into()))?;
        self.out
            .write_all(b"\n")
            .map_err(|e| CurveError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CurveError::io(&self.path, e))
    }
}

pub fn read_snapshots(path: &Path) -> Result<Vec<CurveState>> {
    let file = File::open(path).map_err(|e| CurveError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CurveError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("{}:{}", path.display(), k + 1);
        let s: SnapshotLine = serde_json::from_str(&line)
            .map_err(|e| CurveError::config(where_.clone(), e.to_string()))?;
        if s.nodes.len() != s.nodes_count || s.nodes.iter().any(|p| p.len() != s.n) {
            return Err(CurveError::config(where_, "node array does not match declared n and N"));
        }
        out.push(CurveState::from_points(s.t, &s.nodes)?);
    }
    Ok(out)
}

/// CSV with the fixed [`CSV_HEADER`] columns.
pub struct DiagnosticsWriter {
    path: PathBuf,
    out: csv::Writer<BufWriter<File>>,
}

fn csv_error(path: &Path, e: csv::Error) -> CurveError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CurveError::io(path, io),
        other => CurveError::config(path.display().to_string(), format!("{other:?}")),
    }
}

impl DiagnosticsWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut out = csv::Writer::from_writer(create(&path)?);
        out.write_record(CSV_HEADER)
            .map_err(|e| csv_error(&path, e))?;
        Ok(DiagnosticsWriter { path, out })
    }

    pub fn write(&mut self, record: &DiagnosticsRecord) -> Result<()> {
        self.out
            .write_record(record.values().iter().map(f64::to_string))
            .map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CurveError::io(&self.path, e))
    }
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if !header.iter().eq(CSV_HEADER) {
        return Err(CurveError::config(path.display().to_string(), "unexpected CSV header"));
    }
    let mut out = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let where_ = || format!("{}:{}", path.display(), k + 2);
        let values = row
            .iter()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CurveError::config(where_(), e.to_string()))?;
        let record = DiagnosticsRecord::from_values(&values).ok_or_else(|| {
            CurveError::config(
                where_(),
                format!("expected {} columns, found {}", CSV_HEADER.len(), values.len()),
            )
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn svg_file_name(index: usize) -> String {
    format!("snapshot_{index:06}.svg")
}

/// The first two coordinates as a closed polygon, `y` pointing up.
pub fn svg_string(state: &CurveState) -> String {
    let p = state.points();
    let (xs, ys) = (p.component(0), p.component(1));
    let fold = |v: &[f64], f: fn(f64, f64) -> f64, init| v.iter().copied().fold(init, f);
    let (x0, x1) = (fold(xs, f64::min, f64::INFINITY), fold(xs, f64::max, f64::NEG_INFINITY));
    let (y0, y1) = (fold(ys, f64::min, f64::INFINITY), fold(ys, f64::max, f64::NEG_INFINITY));
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let pad = 0.05 * span;
    let (vx, vy) = (x0 - pad, -y1 - pad);
    let (vw, vh) = (x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);

    let mut d = String::new();
    for i in 0..=state.nodes() {
        let j = i % state.nodes();
        let cmd = if i == 0 { 'M' } else { 'L' };
        d.push_str(&format!("{cmd}{} {} ", xs[j], -ys[j]));
    }
    d.push('Z');
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{vx} {vy} {vw} {vh}\">\n\
         <title>t = {}</title>\n\
         <path d=\"{d}\" fill=\"none\" stroke=\"black\" stroke-width=\"{}\"/>\n\
         </svg>\n",
        state.t,
        span * 0.005
    )
}

pub fn write_svg(path: &Path, state: &CurveState) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(svg_string(state).as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CurveError::io(path, e))
}

/// Streams a run to disk: every record it is handed, every snapshot, and
/// an SVG frame for every `svg_every`-th snapshot.
pub struct RunFiles {
    snapshots: SnapshotWriter,
    diagnostics: DiagnosticsWriter,
    svg_dir: Option<PathBuf>,
    svg_every: usize,
}

impl RunFiles {
    pub fn create(
        snapshots: &Path,
        diagnostics: &Path,
        svg_dir: Option<&Path>,
        svg_every: usize,
    ) -> Result<Self> {
        if let Some(dir) = svg_dir {
            fs::create_dir_all(dir).map_err(|e| CurveError::io(dir, e))?;
        }
        Ok(RunFiles {
            snapshots: SnapshotWriter::create(snapshots)?,
            diagnostics: DiagnosticsWriter::create(diagnostics)?,
            svg_dir: svg_dir.map(Path::to_path_buf),
            svg_every: svg_every.max(1),
        })
    }

    pub fn finish(self) -> Result<()> {
        self.snapshots.finish()?;
        self.diagnostics.finish()
    }
}

impl RunObserver for RunFiles {
    fn on_record(&mut self, record: &DiagnosticsRecord) -> Result<()> {
        self.diagnostics.write(record)
    }

    fn on_snapshot(&mut self, index: usize, state: &CurveState) -> Result<()> {
        self.snapshots.write(state)?;
        if let Some(dir) = &self.svg_dir {
            if index % self.svg_every == 0 {
                write_svg(&dir.join(svg_file_name(index)), state)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{make_preset, Preset, PresetSpec};

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let spec = PresetSpec::new(Preset::PerturbedCircle {
            radius: 1.0,
            amp: 0.1,
            modes: 3,
        });
        let mut a = make_preset(&spec, 64, 3, 9).unwrap();
        a.t = 0.1 + 0.2;
        let b = make_preset(&spec, 64, 3, 10).unwrap();
        let mut w = SnapshotWriter::create(&path).unwrap();
        w.write(&a).unwrap();
        w.write(&b).unwrap();
        w.finish().unwrap();
        let back = read_snapshots(&path).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn svg_has_closed_path_with_repeat() {
        let c = make_preset(&PresetSpec::new(Preset::Circle { radius: 1.0 }), 32, 2, 0).unwrap();
        let svg = svg_string(&c);
        let d = svg.split("d=\"").nth(1).unwrap().split('"').next().unwrap();
        let points = d.matches(['M', 'L']).count();
        assert_eq!(points, 33);
        assert!(d.ends_with('Z'));
        let first = d[1..].split(" L").next().unwrap().trim();
        let last = d.trim_end_matches('Z').trim().rsplit('L').next().unwrap().trim();
        assert_eq!(first, last);
    }

    #[test]
    fn io_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.jsonl");
        match read_snapshots(&missing) {
            Err(CurveError::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diagnostics_rows_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = crate::config::FlowConfig::new(
            PresetSpec::new(Preset::Ellipse { a: 2.0, b: 1.0 }),
            0.5,
            32,
            1e-4,
        );
        cfg.policy.mode = crate::flow::StepMode::AdaptiveCfl(1.0);
        let path = dir.path().join("d.csv");
        let mut files = RunFiles::create(&dir.path().join("s.jsonl"), &path, None, 1).unwrap();
        let traj = crate::flow::evolve_with(&cfg, &mut files).unwrap();
        files.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), CSV_HEADER.len());
        assert!(lines.all(|l| l.split(',').count() == CSV_HEADER.len()));
        let back = read_diagnostics(&path).unwrap();
        assert_eq!(back.len(), traj.steps);
        // NaN != NaN, so compare bit patterns
        let bits = |r: &DiagnosticsRecord| r.values().map(f64::to_bits);
        assert!(back.iter().zip(&traj.diagnostics).all(|(a, b)| bits(a) == bits(b)));
    }

    #[test]
    fn svg_names_are_zero_padded() {
        assert_eq!(svg_file_name(7), "snapshot_000007.svg");
    }
}
