//! Logged bandit feedback from several logging policies.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{hamming, SupervisedDataset};
use crate::error::{CoreError, Result};
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRecord {
    pub logger: usize,
    pub x: Arc<[f64]>,
    pub y: Vec<u8>,
    pub loss: f64,
    pub propensity: f64,
}

/// Records grouped by logger, in generation order within each group.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLoggerDataset {
    num_features: usize,
    num_labels: usize,
    groups: Vec<Vec<BanditRecord>>,
}

impl MultiLoggerDataset {
    pub fn new(num_features: usize, num_labels: usize, groups: Vec<Vec<BanditRecord>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::arg("at least one logger required"));
        }
        for (j, g) in groups.iter().enumerate() {
            for r in g {
                if r.logger != j {
                    return Err(CoreError::arg(format!(
                        "record tagged logger {} stored in group {j}",
                        r.logger
                    )));
                }
                if r.x.len() != num_features || r.y.len() != num_labels {
                    return Err(CoreError::arg("record width disagrees with the dataset"));
                }
                if !(r.propensity > 0.0 && r.propensity <= 1.0) {
                    return Err(CoreError::arg(format!(
                        "propensity {} outside (0, 1]",
                        r.propensity
                    )));
                }
                if !(r.loss >= 0.0 && r.loss <= num_labels as f64) {
                    return Err(CoreError::arg(format!("loss {} outside [0, q_L]", r.loss)));
                }
            }
        }
        Ok(Self {
            num_features,
            num_labels,
            groups,
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_loggers(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, j: usize) -> &[BanditRecord] {
        &self.groups[j]
    }

    pub fn groups(&self) -> &[Vec<BanditRecord>] {
        &self.groups
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records in (logger, index) order.
    pub fn records(&self) -> impl Iterator<Item = &BanditRecord> {
        self.groups.iter().flatten()
    }

    /// Splits every logger's records at random, holding out `⌊fraction · n_j⌋`
    /// of them; each side keeps generation order.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CoreError::arg(format!(
                "validation fraction {fraction} outside (0, 1)"
            )));
        }
        let mut train = Vec::with_capacity(self.groups.len());
        let mut valid = Vec::with_capacity(self.groups.len());
        for (j, g) in self.groups.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.shuffle(&mut rng);
            let held = (fraction * g.len() as f64).floor() as usize;
            let mut is_valid = vec![false; g.len()];
            for &i in &idx[..held] {
                is_valid[i] = true;
            }
            let (mut t, mut v) = (Vec::new(), Vec::new());
            for (r, held_out) in g.iter().zip(is_valid) {
                if held_out {
                    v.push(r.clone());
                } else {
                    t.push(r.clone());
                }
            }
            train.push(t);
            valid.push(v);
        }
        Ok((
            Self::new(self.num_features, self.num_labels, train)?,
            Self::new(self.num_features, self.num_labels, valid)?,
        ))
    }
}

/// Replays the supervised rows through each logger `replay_counts[j]` times.
///
/// Logger `j` draws from its own ChaCha stream `j` of `seed`, so adding a logger
/// never changes the records of the others.
pub fn generate_bandit_dataset(
    data: &SupervisedDataset,
    loggers: &[&dyn Policy],
    replay_counts: &[usize],
    seed: u64,
) -> Result<MultiLoggerDataset> {
    if loggers.is_empty() || loggers.len() != replay_counts.len() {
        return Err(CoreError::arg("one replay count per logger required"));
    }
    if replay_counts.contains(&0) {
        return Err(CoreError::arg("replay counts must be at least 1"));
    }
    for l in loggers {
        if l.num_features() != data.num_features() || l.num_labels() != data.num_labels() {
            return Err(CoreError::arg("logger widths disagree with the dataset"));
        }
    }
    let contexts: Vec<Arc<[f64]>> = (0..data.len()).map(|i| Arc::from(data.features(i))).collect();
    let mut groups = Vec::with_capacity(loggers.len());
    for (j, (logger, &count)) in loggers.iter().zip(replay_counts).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let mut records = Vec::with_capacity(count * data.len());
        for _ in 0..count {
            for (i, x) in contexts.iter().enumerate() {
                let (y, propensity) = logger.sample_action(x, &mut rng);
                let loss = hamming(&y, data.labels(i)) as f64;
                records.push(BanditRecord {
                    logger: j,
                    x: Arc::clone(x),
                    y,
                    loss,
                    propensity,
                });
            }
        }
        groups.push(records);
    }
    MultiLoggerDataset::new(data.num_features(), data.num_labels(), groups)
}

const HEADER_PREFIX: &str = "# mlog-bandit";

/// Tab-separated `logger, label bits, loss, propensity, sparse features` lines
/// after a one-line header carrying the widths.
pub fn to_bandit_string(data: &MultiLoggerDataset) -> String {
    let mut out = format!(
        "{HEADER_PREFIX} features={} labels={} loggers={}\n",
        data.num_features,
        data.num_labels,
        data.num_loggers()
    );
    for r in data.records() {
        let bits: String = r.y.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        let _ = write!(out, "{}\t{bits}\t{}\t{:.16e}\t", r.logger, r.loss, r.propensity);
        let mut first = true;
        for (c, &v) in r.x.iter().enumerate() {
            if v != 0.0 {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{}:{v:?}", c + 1);
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_bandit_str(text: &str, source: &str) -> Result<MultiLoggerDataset> {
    let err = |line: usize, message: String| CoreError::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty bandit file".into()))?;
    let header = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| err(1, "missing bandit header".into()))?;
    let mut dims = [None; 3];
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| err(1, format!("bad header field `{field}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| err(1, format!("bad header value `{field}`")))?;
        match k {
            "features" => dims[0] = Some(v),
            "labels" => dims[1] = Some(v),
            "loggers" => dims[2] = Some(v),
            _ => return Err(err(1, format!("unknown header field `{k}`"))),
        }
    }
    let [Some(p), Some(q), Some(j_count)] = dims else {
        return Err(err(1, "header needs features, labels and loggers".into()));
    };
    let mut groups: Vec<Vec<BanditRecord>> = vec![Vec::new(); j_count];
    for (k, line) in lines {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(lineno, format!("expected 5 tab-separated fields, got {}", cols.len())));
        }
        let logger: usize = cols[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad logger id `{}`", cols[0])))?;
        if logger >= j_count {
            return Err(err(lineno, format!("logger {logger} beyond header count {j_count}")));
        }
        if cols[1].len() != q || !cols[1].bytes().all(|b| b == b'0' || b == b'1') {
            return Err(err(lineno, format!("label bits `{}` are not {q} binary digits", cols[1])));
        }
        let y: Vec<u8> = cols[1].bytes().map(|b| b - b'0').collect();
        let loss: f64 = cols[2]
            .parse()
            .map_err(|_| err(lineno, format!("bad loss `{}`", cols[2])))?;
        let propensity: f64 = cols[3]
            .parse()
            .map_err(|_| err(lineno, format!("bad propensity `{}`", cols[3])))?;
        let mut x = vec![0.0; p];
        for tok in cols[4].split_whitespace() {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| err(lineno, format!("expected idx:val, got `{tok}`")))?;
            let i: usize = i
                .parse()
                .ok()
                .filter(|&i| i >= 1 && i <= p)
                .ok_or_else(|| err(lineno, format!("feature index `{i}` outside 1..={p}")))?;
            x[i - 1] = v
                .parse()
                .map_err(|_| err(lineno, format!("bad feature value `{v}`")))?;
        }
        groups[logger].push(BanditRecord {
            logger,
            x: Arc::from(x),
            y,
            loss,
            propensity,
        });
    }
    MultiLoggerDataset::new(p, q, groups).map_err(|e| err(0, e.to_string()))
}

pub fn write_bandit(data: &MultiLoggerDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bandit_string(data)).map_err(|e| CoreError::io(path, e))
}

pub fn read_bandit(path: impl AsRef<Path>) -> Result<MultiLoggerDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_bandit_str(&text, &path.display().to_string())
}
