//! CSV ingestion and emission, gap imputation, and the seeded synthetic
//! corridor generator.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{construction_feature_map, ConstructionEvent, FeatureKind, FeatureMap, STEP_SECONDS};
use crate::graph::{build_graph, AdjacencyMode, Edge, RoadGraph};
use crate::tensor::Tensor;

pub const SPEEDS_FILE: &str = "speeds.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Speed limits of generated corpora, MPH.
pub const MAX_SPEED: f64 = 80.0;

pub fn parse_timestamp(s: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|d| d.timestamp())
        .map_err(|e| Error::Data(format!("bad timestamp `{s}`: {e}")))
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .expect("timestamp in range")
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn expect_header(rdr: &mut csv::Reader<File>, path: &Path, want: &[&str]) -> Result<()> {
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != want {
        return Err(Error::Data(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            got,
            want
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Edges and events

pub fn load_edges_csv(path: &Path) -> Result<Vec<Edge>> {
    let mut rdr = open(path)?;
    expect_header(&mut rdr, path, &["src", "dst", "distance_miles"])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let d: f64 = rec[2]
            .parse()
            .map_err(|_| Error::Data(format!("{} row {row}: bad distance `{}`", path.display(), &rec[2])))?;
        out.push(Edge::new(&rec[0], &rec[1], d));
    }
    Ok(out)
}

pub fn write_edges_csv(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["src", "dst", "distance_miles"])?;
    for e in edges {
        w.write_record([e.src.as_str(), e.dst.as_str(), &e.distance_miles.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_events_csv(path: &Path) -> Result<Vec<ConstructionEvent>> {
    let mut rdr = open(path)?;
    expect_header(&mut rdr, path, &["segment_id", "start_iso8601", "end_iso8601"])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let ev = ConstructionEvent {
            segment_id: rec[0].to_string(),
            start: parse_timestamp(&rec[1])?,
            end: parse_timestamp(&rec[2])?,
        };
        if ev.start >= ev.end {
            return Err(Error::Data(format!(
                "{} row {row}: event end is not after its start",
                path.display()
            )));
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn write_events_csv(path: &Path, events: &[ConstructionEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["segment_id", "start_iso8601", "end_iso8601"])?;
    for e in events {
        w.write_record([
            e.segment_id.clone(),
            format_timestamp(e.start),
            format_timestamp(e.end),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Speeds

/// Missing `(segment, column)` cells, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MissingMask {
    pub cells: Vec<(usize, usize)>,
}

impl MissingMask {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Read a wide speed table. Missing cells hold NaN in the returned map and
/// are listed in the mask. With a roster, columns are reordered to match it
/// and must cover it exactly.
pub fn load_speeds_csv(path: &Path, roster: Option<&[String]>) -> Result<(FeatureMap, MissingMask)> {
    let mut rdr = open(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("timestamp") || header.len() < 2 {
        return Err(Error::Data(format!(
            "{}: header must be `timestamp,<segment>,...`",
            path.display()
        )));
    }
    let cols = &header[1..];
    let mut seen = BTreeMap::new();
    for (j, c) in cols.iter().enumerate() {
        if seen.insert(c.clone(), j).is_some() {
            return Err(Error::Data(format!("{}: duplicate segment column `{c}`", path.display())));
        }
    }
    let order: Vec<String> = match roster {
        Some(r) => {
            if let Some(unknown) = cols.iter().find(|c| !r.contains(c)) {
                return Err(Error::UnknownSegment(unknown.clone()));
            }
            if let Some(missing) = r.iter().find(|s| !seen.contains_key(*s)) {
                return Err(Error::Data(format!(
                    "{}: no column for segment `{missing}`",
                    path.display()
                )));
            }
            r.to_vec()
        }
        None => cols.to_vec(),
    };
    let n = order.len();
    let col_of: Vec<usize> = order.iter().map(|s| seen[s]).collect();

    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut start = None;
    let mut prev: Option<(i64, usize)> = None;
    let mut mask = Vec::new();
    for (t, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = t + 2;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "{} row {line}: {} fields, expected {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        let ts = parse_timestamp(&rec[0])?;
        if let Some((p, pline)) = prev {
            if ts != p + STEP_SECONDS {
                let what = if ts == p { "duplicate" } else { "irregular spacing" };
                return Err(Error::Data(format!(
                    "{}: {what} between row {pline} ({}) and row {line} ({}); rows must be exactly 5 minutes apart",
                    path.display(),
                    format_timestamp(p),
                    format_timestamp(ts)
                )));
            }
        }
        start.get_or_insert(ts);
        prev = Some((ts, line));
        for (i, &j) in col_of.iter().enumerate() {
            let cell = &rec[j + 1];
            let v = if cell.is_empty() {
                mask.push((i, t));
                f64::NAN
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("{} row {line}: bad speed `{cell}` for `{}`", path.display(), order[i]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("{} row {line}: non-finite speed", path.display())));
                }
                v
            };
            rows[i].push(v);
        }
    }
    let start = start.ok_or_else(|| Error::Data(format!("{}: no data rows", path.display())))?;
    let t = rows[0].len();
    mask.sort_unstable();
    let values = Tensor::new(&[n, t], rows.concat())?;
    Ok((
        FeatureMap {
            kind: FeatureKind::Speed,
            segment_ids: order,
            values,
            start,
        },
        MissingMask { cells: mask },
    ))
}

/// Write a wide speed table; NaN cells are written empty.
pub fn write_speeds_csv(path: &Path, fmap: &FeatureMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(fmap.segment_ids.iter().cloned());
    w.write_record(&header)?;
    let (n, t) = (fmap.n(), fmap.t());
    let d = fmap.values.data();
    for col in 0..t {
        let mut rec = Vec::with_capacity(n + 1);
        rec.push(format_timestamp(fmap.timestamp(col)));
        for i in 0..n {
            let v = d[i * t + col];
            rec.push(if v.is_nan() { String::new() } else { v.to_string() });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Forward-fill each segment from its last observation, then back-fill any
/// leading gap. Returns the filled map and the number of imputed cells.
pub fn impute_missing(fmap: &FeatureMap, mask: &MissingMask) -> Result<(FeatureMap, usize)> {
    let (n, t) = (fmap.n(), fmap.t());
    let mut missing = vec![false; n * t];
    for &(i, c) in &mask.cells {
        if i >= n || c >= t {
            return Err(invalid(format!("mask cell ({i}, {c}) outside {n}×{t} map")));
        }
        missing[i * t + c] = true;
    }
    let mut out = fmap.clone();
    let d = out.values.data_mut();
    for i in 0..n {
        let row = i * t..(i + 1) * t;
        let first = row.clone().find(|&k| !missing[k]).ok_or_else(|| {
            Error::Data(format!("segment `{}` has no observations", fmap.segment_ids[i]))
        })?;
        let mut last = d[first];
        for k in row {
            if missing[k] {
                d[k] = last;
            } else {
                last = d[k];
            }
        }
    }
    Ok((out, mask.len()))
}

// ---------------------------------------------------------------------------
// Synthetic corridor generator

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Topology {
    Ring,
    Grid,
    /// Chain backbone plus each other pair linked with probability `p`.
    Random { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSchedule {
    pub count: usize,
    pub min_hours: f64,
    pub max_hours: f64,
    /// Fractional free-flow reduction at the event segment.
    pub depth: f64,
    /// Influence radius in miles.
    pub radius: f64,
}

impl Default for EventSchedule {
    fn default() -> Self {
        EventSchedule {
            count: 30,
            min_hours: 2.0,
            max_hours: 6.0,
            depth: 0.5,
            radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_segments: usize,
    pub topology: Topology,
    pub days: usize,
    /// Edge lengths are drawn uniformly from this range (miles).
    pub edge_miles: (f64, f64),
    /// Per-segment base free-flow speed range (MPH).
    pub base_speed: (f64, f64),
    /// Relative amplitude of the daily free-flow sinusoid.
    pub amplitude: f64,
    /// Per-segment phases are drawn uniformly from `[0, phase_spread)` radians.
    pub phase_spread: f64,
    /// Coupling toward the neighbour mean per step.
    pub diffusion: f64,
    /// Pull toward the current free-flow speed per step.
    pub reversion: f64,
    /// Std of the per-step Gaussian noise (MPH).
    pub noise: f64,
    pub events: EventSchedule,
    pub start: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_segments: 20,
            topology: Topology::Ring,
            days: 21,
            edge_miles: (0.5, 2.0),
            base_speed: (45.0, 65.0),
            amplitude: 0.25,
            phase_spread: std::f64::consts::FRAC_PI_2,
            diffusion: 0.2,
            reversion: 0.1,
            noise: 1.0,
            events: EventSchedule::default(),
            start: "2019-01-01T00:00:00Z".into(),
            seed: 42,
        }
    }
}

pub const STEPS_PER_DAY: usize = (24 * 60 * 60 / STEP_SECONDS) as usize;

impl SyntheticConfig {
    pub fn steps(&self) -> usize {
        self.days * STEPS_PER_DAY
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(invalid("n_segments must be positive"));
        }
        if self.days == 0 {
            return Err(invalid("days must be positive"));
        }
        if !(self.diffusion > 0.0 && self.diffusion < 0.5) {
            return Err(invalid(format!(
                "diffusion {} is unstable: must lie in (0, 0.5)",
                self.diffusion
            )));
        }
        if !(0.0..1.0).contains(&self.reversion) || self.diffusion + self.reversion >= 1.0 {
            return Err(invalid("reversion must lie in [0, 1) with diffusion + reversion < 1"));
        }
        if !(0.0..1.0).contains(&self.events.depth) {
            return Err(invalid(format!("event depth {} must lie in [0, 1)", self.events.depth)));
        }
        if self.noise < 0.0 || self.amplitude < 0.0 || self.amplitude >= 1.0 {
            return Err(invalid("noise must be non-negative and amplitude in [0, 1)"));
        }
        let (lo, hi) = self.edge_miles;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid("edge_miles must be a positive range"));
        }
        let (lo, hi) = self.base_speed;
        if !(lo > 0.0 && hi >= lo && hi <= MAX_SPEED) {
            return Err(invalid(format!("base_speed must be a range within (0, {MAX_SPEED}]")));
        }
        let e = &self.events;
        if e.count > 0 && !(e.min_hours > 0.0 && e.max_hours >= e.min_hours && e.radius > 0.0) {
            return Err(invalid("event durations and radius must be positive"));
        }
        if let Topology::Random { p } = self.topology {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("random topology probability {p} outside [0, 1]")));
            }
        }
        parse_timestamp(&self.start)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub graph: RoadGraph,
    pub edges: Vec<Edge>,
    pub speeds: FeatureMap,
    pub events: Vec<ConstructionEvent>,
    /// Free-flow speed the dynamics relax toward, events included.
    pub free_flow: FeatureMap,
}

fn segment_ids(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|i| format!("seg{i:0width$}")).collect()
}

fn topology_pairs(n: usize, topo: Topology, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    match topo {
        Topology::Ring => {
            for i in 0..n.saturating_sub(1) {
                pairs.push((i, i + 1));
            }
            if n > 2 {
                pairs.push((n - 1, 0));
            }
        }
        Topology::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            for i in 0..n {
                if (i + 1) % cols != 0 && i + 1 < n {
                    pairs.push((i, i + 1));
                }
                if i + cols < n {
                    pairs.push((i, i + cols));
                }
            }
        }
        Topology::Random { p } => {
            for i in 0..n {
                for j in i + 1..n {
                    let draw: f64 = rng.gen();
                    if j == i + 1 || draw < p {
                        pairs.push((i, j));
                    }
                }
            }
        }
    }
    pairs
}

/// Stream ids keep each random component independent, so e.g. changing the
/// event schedule leaves the noise sequence untouched.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let n = cfg.n_segments;
    let t = cfg.steps();
    let start = parse_timestamp(&cfg.start)?;
    let ids = segment_ids(n);

    let mut topo_rng = stream(cfg.seed, 1);
    let edges: Vec<Edge> = topology_pairs(n, cfg.topology, &mut topo_rng)
        .into_iter()
        .map(|(a, b)| {
            let (lo, hi) = cfg.edge_miles;
            let d = if hi > lo { topo_rng.gen_range(lo..hi) } else { lo };
            Edge::new(&ids[a], &ids[b], d)
        })
        .collect();
    let graph = build_graph(&ids, &edges, AdjacencyMode::Gaussian)?;

    let mut prof_rng = stream(cfg.seed, 2);
    let base: Vec<f64> = (0..n)
        .map(|_| {
            let (lo, hi) = cfg.base_speed;
            if hi > lo {
                prof_rng.gen_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    let phase: Vec<f64> = (0..n)
        .map(|_| {
            if cfg.phase_spread > 0.0 {
                prof_rng.gen_range(0.0..cfg.phase_spread)
            } else {
                0.0
            }
        })
        .collect();

    let mut ev_rng = stream(cfg.seed, 3);
    let sched = &cfg.events;
    let steps_per_hour = (3600 / STEP_SECONDS) as f64;
    let mut events: Vec<ConstructionEvent> = (0..sched.count)
        .map(|_| {
            let seg = ev_rng.gen_range(0..n);
            let lo = (sched.min_hours * steps_per_hour).round() as usize;
            let hi = (sched.max_hours * steps_per_hour).round() as usize;
            let dur = ev_rng.gen_range(lo..=hi).clamp(1, t);
            let first = ev_rng.gen_range(0..=t - dur);
            ConstructionEvent {
                segment_id: ids[seg].clone(),
                start: start + first as i64 * STEP_SECONDS,
                end: start + (first + dur) as i64 * STEP_SECONDS,
            }
        })
        .collect();
    events.sort_by(|a, b| (a.start, &a.segment_id).cmp(&(b.start, &b.segment_id)));

    let influence = construction_feature_map(&graph, &events, sched.radius, t, start)?;
    let mut ff = Tensor::zeros(&[n, t]);
    {
        let inf = influence.values.data();
        let fd = ff.data_mut();
        for i in 0..n {
            for col in 0..t {
                let day = 2.0 * std::f64::consts::PI * (col % STEPS_PER_DAY) as f64 / STEPS_PER_DAY as f64;
                let profile = base[i] * (1.0 + cfg.amplitude * (day + phase[i]).sin());
                fd[i * t + col] = profile * (1.0 - sched.depth * inf[i * t + col]);
            }
        }
    }

    let neighbors = graph.neighbor_lists();
    let mut noise_rng = stream(cfg.seed, 4);
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let fd = ff.data();
    let mut speeds = vec![0.0; n * t];
    let mut cur: Vec<f64> = (0..n).map(|i| fd[i * t]).collect();
    for col in 0..t {
        for i in 0..n {
            speeds[i * t + col] = cur[i];
        }
        if col + 1 == t {
            break;
        }
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let nb = &neighbors[i];
                let pull = if nb.is_empty() {
                    0.0
                } else {
                    nb.iter().map(|&j| cur[j]).sum::<f64>() / nb.len() as f64 - cur[i]
                };
                let eps = if cfg.noise > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
                let s = cur[i] + cfg.diffusion * pull + cfg.reversion * (fd[i * t + col + 1] - cur[i]) + eps;
                s.clamp(0.0, MAX_SPEED)
            })
            .collect();
        cur = next;
    }

    let seg = graph.segment_ids().to_vec();
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        speeds: FeatureMap {
            kind: FeatureKind::Speed,
            segment_ids: seg.clone(),
            values: Tensor::new(&[n, t], speeds)?,
            start,
        },
        free_flow: FeatureMap {
            kind: FeatureKind::Speed,
            segment_ids: seg,
            values: ff,
            start,
        },
        graph,
        edges,
        events,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub generator: SyntheticConfig,
    pub seed: u64,
    pub segments: usize,
    pub steps: usize,
    pub events: usize,
}

impl SyntheticCorpus {
    /// Write speeds/edges/events CSVs and truth.json into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_speeds_csv(&dir.join(SPEEDS_FILE), &self.speeds)?;
        write_edges_csv(&dir.join(EDGES_FILE), &self.edges)?;
        write_events_csv(&dir.join(EVENTS_FILE), &self.events)?;
        let truth = TruthRecord {
            generator: self.config.clone(),
            seed: self.config.seed,
            segments: self.speeds.n(),
            steps: self.speeds.t(),
            events: self.events.len(),
        };
        std::fs::write(dir.join(TRUTH_FILE), serde_json::to_string_pretty(&truth)?)?;
        Ok(())
    }
}

/// A corpus read back from disk, gaps imputed.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub graph: RoadGraph,
    pub speeds: FeatureMap,
    pub events: Vec<ConstructionEvent>,
    pub missing: MissingMask,
    pub imputed: usize,
}

pub fn corpus_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(SPEEDS_FILE), dir.join(EDGES_FILE), dir.join(EVENTS_FILE)]
}

/// Load a corpus directory. The roster is the union of the speed columns and
/// the edge endpoints; every roster segment must have a speed column.
/// A missing events file means no events.
pub fn load_corpus(dir: &Path, mode: AdjacencyMode) -> Result<Corpus> {
    let [sp, ed, ev] = corpus_paths(dir);
    let edges = load_edges_csv(&ed)?;
    let (raw, _) = load_speeds_csv(&sp, None)?;
    let graph = build_graph(&raw.segment_ids, &edges, mode)?;
    let (speeds, missing) = load_speeds_csv(&sp, Some(graph.segment_ids()))?;
    let events = if ev.exists() { load_events_csv(&ev)? } else { Vec::new() };
    for e in &events {
        graph.index_of(&e.segment_id)?;
    }
    let (speeds, imputed) = impute_missing(&speeds, &missing)?;
    Ok(Corpus {
        graph,
        speeds,
        events,
        missing,
        imputed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn rows(n: usize, step_min: i64, cells: impl Fn(usize) -> String) -> String {
        let mut s = String::from("timestamp,a,b,c\n");
        for r in 0..n {
            let ts = format_timestamp(1_546_300_800 + r as i64 * step_min * 60);
            s.push_str(&format!("{ts},{}\n", cells(r)));
        }
        s
    }

    #[test]
    fn load_well_formed_speeds() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", &rows(10, 5, |r| format!("{r},{},{}", r + 1, r + 2)));
        let (m, mask) = load_speeds_csv(&p, None).unwrap();
        assert_eq!((m.n(), m.t()), (3, 10));
        assert!(mask.is_empty());
        assert_eq!(m.row(1)[3], 4.0);
        assert_eq!(m.start, 1_546_300_800);
    }

    #[test]
    fn missing_cell_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.csv",
            &rows(4, 5, |r| if r == 2 { "1,,3".into() } else { "1,2,3".into() }),
        );
        let (m, mask) = load_speeds_csv(&p, None).unwrap();
        assert_eq!(mask.cells, vec![(1, 2)]);
        assert!(m.row(1)[2].is_nan());
    }

    #[test]
    fn bad_spacing_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", &rows(3, 10, |_| "1,2,3".into()));
        let msg = load_speeds_csv(&p, None).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("row 3"), "{msg}");
        assert!(msg.contains("2019-01-01T00:00:00Z") && msg.contains("2019-01-01T00:10:00Z"), "{msg}");
        let p = write(dir.path(), "d.csv", &rows(3, 0, |_| "1,2,3".into()));
        assert!(load_speeds_csv(&p, None).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn roster_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", &rows(2, 5, |_| "1,2,3".into()));
        let roster: Vec<String> = ["c", "a", "b"].map(String::from).to_vec();
        let (m, _) = load_speeds_csv(&p, Some(&roster)).unwrap();
        assert_eq!(m.row(0), &[3.0, 3.0]);
        let short: Vec<String> = ["a", "b"].map(String::from).to_vec();
        assert!(matches!(load_speeds_csv(&p, Some(&short)), Err(Error::UnknownSegment(s)) if s == "c"));
    }

    #[test]
    fn imputation_rules() {
        let fm = |v: Vec<f64>| FeatureMap {
            kind: FeatureKind::Speed,
            segment_ids: vec!["x".into()],
            values: Tensor::new(&[1, v.len()], v).unwrap(),
            start: 0,
        };
        let (out, k) = impute_missing(
            &fm(vec![10.0, f64::NAN, f64::NAN, 20.0]),
            &MissingMask { cells: vec![(0, 1), (0, 2)] },
        )
        .unwrap();
        assert_eq!(out.values.data(), &[10.0, 10.0, 10.0, 20.0]);
        assert_eq!(k, 2);
        let (out, _) = impute_missing(&fm(vec![f64::NAN, 15.0]), &MissingMask { cells: vec![(0, 0)] }).unwrap();
        assert_eq!(out.values.data(), &[15.0, 15.0]);
        let clean = fm(vec![1.0, 2.0]);
        assert_eq!(impute_missing(&clean, &MissingMask::default()).unwrap().0, clean);
        assert!(impute_missing(&fm(vec![f64::NAN]), &MissingMask { cells: vec![(0, 0)] }).is_err());
    }

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_segments: 6,
            days: 2,
            events: EventSchedule { count: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.speeds, b.speeds);
        assert_eq!(a.events, b.events);
        assert!(a.speeds.values.data().iter().all(|v| (0.0..=MAX_SPEED).contains(v)));
        assert_eq!(a.speeds.t(), 2 * 288);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.speeds, c.speeds);
    }

    #[test]
    fn null_events_leave_corpus_unchanged() {
        let with = SyntheticConfig {
            events: EventSchedule { depth: 0.0, ..small().events },
            ..small()
        };
        let without = SyntheticConfig {
            events: EventSchedule { count: 0, ..small().events },
            ..small()
        };
        let a = generate_synthetic(&with).unwrap();
        let b = generate_synthetic(&without).unwrap();
        assert_eq!(a.speeds, b.speeds);
    }

    #[test]
    fn flat_noiseless_profile_is_fixed_point() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            amplitude: 0.0,
            base_speed: (55.0, 55.0),
            events: EventSchedule { count: 0, ..Default::default() },
            ..small()
        };
        let c = generate_synthetic(&cfg).unwrap();
        assert!(c.speeds.values.data().iter().all(|&v| v == 55.0));
    }

    #[test]
    fn unstable_diffusion_rejected() {
        for d in [0.0, 0.5, 0.7] {
            let cfg = SyntheticConfig { diffusion: d, ..small() };
            assert!(generate_synthetic(&cfg).is_err());
        }
    }

    #[test]
    fn corpus_round_trip() {
        let c = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = load_corpus(dir.path(), AdjacencyMode::Gaussian).unwrap();
        assert_eq!(back.speeds, c.speeds);
        assert_eq!(back.events, c.events);
        assert_eq!(back.graph, c.graph);
        assert_eq!(back.imputed, 0);
        let edges = load_edges_csv(&dir.path().join(EDGES_FILE)).unwrap();
        assert_eq!(edges, c.edges);
    }
}
