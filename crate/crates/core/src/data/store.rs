//! Prepared dataset directories: `meta.json` plus one CSV per split with
//! columns `window, series, start, role, t, d, x`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::clean::{clean_series, mcar_sparsify, CleanConfig};
use super::corpus::RawSeries;
use super::synth::{synth_suite, SynthConfig};
use super::windows::{make_windows, split_windows, MaskedSeries, SplitFractions, Splits, Window, WindowConfig};
use crate::encoder::align_events;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Source {
    Synthetic(SynthConfig),
    Csv { path: String, variates: usize, group: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub clean: CleanConfig,
    pub windows: WindowConfig,
    pub split: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub windows: usize,
    pub events: usize,
    pub observed: usize,
    pub queries: usize,
}

impl SplitCounts {
    fn of(ws: &[Window]) -> Self {
        Self {
            windows: ws.len(),
            events: ws.iter().map(|w| w.history.len()).sum(),
            observed: ws.iter().map(|w| w.history.observed()).sum(),
            queries: ws.iter().map(Window::num_queries).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: u32,
    pub source: Source,
    pub config: PrepareConfig,
    pub variates: usize,
    pub series: Vec<String>,
    /// FNV-1a digest of every keep flag, in series/variate/day order.
    pub mask_digest: String,
    pub splits: BTreeMap<String, SplitCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: Meta,
    pub splits: Splits,
}

fn digest(series: &[MaskedSeries]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in series {
        for m in &s.mask {
            for &b in m {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

/// MCAR masks for clean trajectories; variate `v` of series `s` uses the
/// stream `seed ^ (s * D + v)`.
pub fn sparsify(clean: Vec<(String, Vec<Vec<f64>>)>, rate: f64, seed: u64) -> Result<Vec<MaskedSeries>> {
    let mut out = Vec::with_capacity(clean.len());
    let mut index = 0u64;
    for (name, reference) in clean {
        let mut mask = Vec::with_capacity(reference.len());
        for v in &reference {
            mask.push(mcar_sparsify(v.len(), rate, seed, index)?);
            index += 1;
        }
        out.push(MaskedSeries { name, reference, mask });
    }
    Ok(out)
}

fn assemble(source: Source, masked: Vec<MaskedSeries>, cfg: &PrepareConfig) -> Result<Dataset> {
    let variates = masked.first().map_or(0, MaskedSeries::variates);
    let windows = make_windows(&masked, &cfg.windows)?;
    if windows.is_empty() {
        return Err(Error::Data("no series is long enough for a single window".into()));
    }
    let splits = split_windows(windows, cfg.split);
    let mut counts = BTreeMap::new();
    counts.insert("train".to_string(), SplitCounts::of(&splits.train));
    counts.insert("val".to_string(), SplitCounts::of(&splits.val));
    counts.insert("test".to_string(), SplitCounts::of(&splits.test));
    let meta = Meta {
        version: DATASET_VERSION,
        source,
        config: cfg.clone(),
        variates,
        series: masked.iter().map(|s| s.name.clone()).collect(),
        mask_digest: digest(&masked),
        splits: counts,
    };
    Ok(Dataset { meta, splits })
}

/// Synthetic trajectories are already clean; they are only sparsified.
pub fn prepare_synthetic(synth: &SynthConfig, cfg: &PrepareConfig) -> Result<Dataset> {
    cfg.clean.validate()?;
    let clean = synth_suite(synth)?;
    let masked = sparsify(clean, cfg.clean.rate, cfg.clean.seed)?;
    assemble(Source::Synthetic(synth.clone()), masked, cfg)
}

/// Cleans every corpus row and groups consecutive rows into series of
/// `group` variates (a trailing partial group is dropped).
pub fn prepare_corpus(raw: &[RawSeries], group: usize, path: &str, cfg: &PrepareConfig) -> Result<Dataset> {
    cfg.clean.validate()?;
    if group == 0 || group > raw.len() {
        return Err(Error::Config(format!("cannot group {} rows into series of {group} variates", raw.len())));
    }
    let len = raw[0].values.len();
    if raw.iter().any(|r| r.values.len() != len) {
        return Err(Error::Data("corpus rows have different lengths".into()));
    }
    let clean: Vec<(String, Vec<Vec<f64>>)> = raw
        .chunks_exact(group)
        .map(|rows| {
            let name = rows.iter().map(|r| r.id.as_str()).collect::<Vec<_>>().join("|");
            (name, rows.iter().map(|r| clean_series(&r.values, &cfg.clean)).collect())
        })
        .collect();
    let masked = sparsify(clean, cfg.clean.rate, cfg.clean.seed)?;
    let source = Source::Csv { path: path.to_string(), variates: raw.len(), group };
    assemble(source, masked, cfg)
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[Window]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Usage(format!("unknown split `{name}`"))),
        }
    }
}

fn write_split(path: &Path, windows: &[Window]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window", "series", "start", "role", "t", "d", "x"])?;
    for (id, win) in windows.iter().enumerate() {
        let (id, series, start) = (id.to_string(), win.series.to_string(), win.start.to_string());
        let h = &win.history;
        for k in 0..h.len() {
            for d in 0..h.variates() {
                if h.mask.at(&[k, d]) == 1.0 {
                    let (t, x) = (h.times[k].to_string(), h.values.at(&[k, d]).to_string());
                    w.write_record([id.as_str(), &series, &start, "history", &t, &d.to_string(), &x])?;
                }
            }
        }
        for (d, (qs, xs)) in win.queries.iter().zip(&win.truths).enumerate() {
            for (q, x) in qs.iter().zip(xs) {
                w.write_record([id.as_str(), &series, &start, "query", &q.to_string(), &d.to_string(), &x.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct Partial {
    series: usize,
    start: usize,
    history: Vec<Vec<(f64, f64)>>,
    queries: Vec<Vec<f64>>,
    truths: Vec<Vec<f64>>,
}

fn read_split(path: &Path, variates: usize) -> Result<Vec<Window>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut parts: BTreeMap<usize, Partial> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).ok_or(Error::Parse { row: line, col: c + 1, msg: "missing field".into() });
        let int = |c: usize| -> Result<usize> {
            field(c)?.parse().map_err(|e| Error::Parse { row: line, col: c + 1, msg: format!("{e}") })
        };
        let real = |c: usize| -> Result<f64> {
            field(c)?.parse().map_err(|e| Error::Parse { row: line, col: c + 1, msg: format!("{e}") })
        };
        let (id, d) = (int(0)?, int(5)?);
        if d >= variates {
            return Err(Error::Parse { row: line, col: 6, msg: format!("variate {d} out of {variates}") });
        }
        let p = parts.entry(id).or_insert_with(|| Partial {
            history: vec![Vec::new(); variates],
            queries: vec![Vec::new(); variates],
            truths: vec![Vec::new(); variates],
            ..Default::default()
        });
        p.series = int(1)?;
        p.start = int(2)?;
        let (t, x) = (real(4)?, real(6)?);
        match field(3)? {
            "history" => p.history[d].push((t, x)),
            "query" => {
                p.queries[d].push(t);
                p.truths[d].push(x);
            }
            other => return Err(Error::Parse { row: line, col: 4, msg: format!("unknown role `{other}`") }),
        }
    }
    parts
        .into_values()
        .map(|p| {
            Ok(Window {
                series: p.series,
                start: p.start,
                history: align_events(&p.history)?,
                queries: p.queries,
                truths: p.truths,
            })
        })
        .collect()
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&ds.meta)? + "\n")?;
    for name in SPLIT_NAMES {
        write_split(&dir.join(format!("{name}.csv")), ds.splits.get(name)?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Data(format!("{} is not a prepared dataset (no meta.json)", dir.display())));
    }
    let meta: Meta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    if meta.version != DATASET_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {}", meta.version)));
    }
    let splits = Splits {
        train: read_split(&dir.join("train.csv"), meta.variates)?,
        val: read_split(&dir.join("val.csv"), meta.variates)?,
        test: read_split(&dir.join("test.csv"), meta.variates)?,
    };
    Ok(Dataset { meta, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SynthConfig, PrepareConfig) {
        (SynthConfig { series: 2, length: 240, ..Default::default() }, PrepareConfig::default())
    }

    #[test]
    fn round_trip() {
        let (s, c) = small();
        let ds = prepare_synthetic(&s, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rates_give_distinct_masks() {
        let (s, mut c) = small();
        let mut digests = Vec::new();
        for r in [0.25, 0.5, 0.75] {
            c.clean.rate = r;
            digests.push(prepare_synthetic(&s, &c).unwrap().meta.mask_digest);
        }
        digests.dedup();
        assert_eq!(digests.len(), 3);
    }

    #[test]
    fn corpus_grouping() {
        let raw: Vec<RawSeries> = (0..5)
            .map(|i| RawSeries {
                id: format!("r{i}"),
                values: (0..130).map(|t| if t % 7 == 3 { None } else { Some((t + i) as f64) }).collect(),
            })
            .collect();
        let ds = prepare_corpus(&raw, 2, "x.csv", &PrepareConfig::default()).unwrap();
        assert_eq!(ds.meta.series, vec!["r0|r1".to_string(), "r2|r3".to_string()]);
        assert_eq!(ds.meta.variates, 2);
        assert!(prepare_corpus(&raw, 6, "x.csv", &PrepareConfig::default()).is_err());
    }
}
