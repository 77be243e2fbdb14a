//! Batch acquisition and batch-level feature deduplication.
//!
//! Batches come either from a synthetic power-law generator or from a
//! Criteo-format TSV file. [`virtual_sparse_id`] then rewrites a batch into a
//! list of its unique features plus per-entry pointers into that list.

use std::hash::Hasher;
use std::ops::Range;
use std::path::{Path, PathBuf};

use fnv::{FnvHashMap, FnvHasher};
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::ids::{FeatureId, VirtualId};
use crate::rng;

/// Categorical columns in a Criteo line.
pub const CRITEO_CATEGORICAL: usize = 26;
/// Numeric columns in a Criteo line; read past and dropped.
pub const CRITEO_NUMERIC: usize = 13;

/// Feature id used for an empty categorical column.
pub const MISSING_FEATURE: FeatureId = FeatureId::new(0);

// Ground-truth click model used to label synthetic rows.
const TRUTH_BIAS: f64 = -1.0;
const TRUTH_WEIGHT_SCALE: f64 = 0.5;

/// A global batch before deduplication: `rows x num_fields` feature ids in
/// row-major order plus one click label per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawBatch {
    num_fields: usize,
    instances: Vec<FeatureId>,
    labels: Vec<u8>,
}

impl RawBatch {
    pub fn new(num_fields: usize, instances: Vec<FeatureId>, labels: Vec<u8>) -> Self {
        assert!(num_fields > 0, "a batch needs at least one field");
        assert_eq!(
            instances.len(),
            labels.len() * num_fields,
            "every row must have exactly {num_fields} features"
        );
        assert!(labels.iter().all(|&y| y <= 1), "labels must be 0 or 1");
        Self {
            num_fields,
            instances,
            labels,
        }
    }

    /// Builds a batch from nested rows; every label is 0.
    pub fn from_rows<R: AsRef<[u64]>>(rows: &[R]) -> Self {
        let num_fields = rows.first().map_or(1, |r| r.as_ref().len());
        let instances = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied().map(FeatureId::new))
            .collect();
        Self::new(num_fields, instances, vec![0; rows.len()])
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn row(&self, r: usize) -> &[FeatureId] {
        &self.instances[r * self.num_fields..(r + 1) * self.num_fields]
    }

    pub fn instances(&self) -> &[FeatureId] {
        &self.instances
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// A global batch after deduplication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupBatch {
    /// Unique features in order of first appearance.
    pub global_ids: Vec<FeatureId>,
    /// `rows x num_fields` pointers into `global_ids`.
    pub virtual_ids: Vec<VirtualId>,
    pub num_fields: usize,
    pub labels: Vec<u8>,
    /// Contiguous rows trained by each worker.
    pub worker_row_ranges: Vec<Range<usize>>,
}

impl DedupBatch {
    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_unique(&self) -> usize {
        self.global_ids.len()
    }

    pub fn num_entries(&self) -> usize {
        self.virtual_ids.len()
    }

    pub fn num_workers(&self) -> usize {
        self.worker_row_ranges.len()
    }

    pub fn row(&self, r: usize) -> &[VirtualId] {
        &self.virtual_ids[r * self.num_fields..(r + 1) * self.num_fields]
    }

    /// Virtual ids of the rows assigned to `worker`, row-major.
    pub fn worker_virtual_ids(&self, worker: usize) -> &[VirtualId] {
        let rows = &self.worker_row_ranges[worker];
        &self.virtual_ids[rows.start * self.num_fields..rows.end * self.num_fields]
    }

    pub fn worker_labels(&self, worker: usize) -> &[u8] {
        &self.labels[self.worker_row_ranges[worker].clone()]
    }

    /// How many entries of the batch point at each unique feature.
    pub fn occurrences(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.global_ids.len()];
        for v in &self.virtual_ids {
            counts[v.index()] += 1;
        }
        counts
    }

    /// Rebuilds the original batch.
    pub fn to_raw(&self) -> RawBatch {
        let instances = self
            .virtual_ids
            .iter()
            .map(|v| self.global_ids[v.index()])
            .collect();
        RawBatch::new(self.num_fields, instances, self.labels.clone())
    }
}

/// Splits `rows` into `workers` contiguous ranges whose lengths differ by at
/// most one (earlier workers take the extra rows).
pub fn split_rows(rows: usize, workers: usize) -> Vec<Range<usize>> {
    assert!(workers >= 1);
    let base = rows / workers;
    let extra = rows % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Deduplicates the features of `batch` and assigns its rows to `workers`.
pub fn virtual_sparse_id(batch: &RawBatch, workers: usize) -> DedupBatch {
    let mut position: FnvHashMap<FeatureId, VirtualId> =
        FnvHashMap::with_capacity_and_hasher(batch.instances.len() / 2, Default::default());
    let mut global_ids = Vec::new();
    let virtual_ids = batch
        .instances
        .iter()
        .map(|&f| {
            *position.entry(f).or_insert_with(|| {
                global_ids.push(f);
                VirtualId::new((global_ids.len() - 1) as u32)
            })
        })
        .collect();
    DedupBatch {
        global_ids,
        virtual_ids,
        num_fields: batch.num_fields,
        labels: batch.labels.clone(),
        worker_row_ranges: split_rows(batch.num_rows(), workers),
    }
}

/// Vocabulary range owned by `field` when `vocab` ids are split evenly
/// across `fields` fields.
pub fn field_shard(field: usize, fields: usize, vocab: u64) -> Range<u64> {
    let f = fields as u64;
    let i = field as u64;
    (i * vocab / f)..((i + 1) * vocab / f)
}

/// Hidden per-feature click weight of the synthetic ground truth.
pub fn truth_weight(seed: u64, feature: FeatureId) -> f64 {
    (2.0 * rng::unit_hash(seed, "truth", feature.get()) - 1.0) * TRUTH_WEIGHT_SCALE
}

/// Draws synthetic global batch number `step`.
///
/// Field `j` draws Zipf-distributed ranks over its own vocabulary shard, so
/// low ids of each shard are the hot features. Labels follow a logistic model
/// over hidden per-feature weights, which makes the task learnable. The
/// result depends only on the seed, the step and the batch shape.
pub fn generate_batch(config: &SimConfig, step: u64) -> RawBatch {
    let rows = config.global_batch_size();
    let fields = config.num_fields;
    let mut rng = rng::stream(config.seed, "batch", step);
    let shards: Vec<(u64, Zipf<f64>)> = (0..fields)
        .map(|j| {
            let shard = field_shard(j, fields, config.vocabulary_size);
            let zipf = Zipf::new((shard.end - shard.start) as f64, config.zipf_exponent)
                .expect("validated zipf parameters");
            (shard.start, zipf)
        })
        .collect();

    let mut instances = Vec::with_capacity(rows * fields);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut logit = TRUTH_BIAS;
        for (start, zipf) in &shards {
            let rank = zipf.sample(&mut rng) as u64;
            let f = FeatureId::new(start + rank - 1);
            logit += truth_weight(config.seed, f);
            instances.push(f);
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        labels.push(u8::from(rng.random::<f64>() < p));
    }
    RawBatch::new(fields, instances, labels)
}

/// Stable 64-bit hash (FNV-1a) of a categorical token.
pub fn token_hash(token: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

/// Maps a categorical token to a feature id; empty tokens map to
/// [`MISSING_FEATURE`].
pub fn criteo_feature(token: &str, vocab: u64) -> FeatureId {
    if token.is_empty() {
        MISSING_FEATURE
    } else {
        FeatureId::new(token_hash(token) % vocab)
    }
}

/// A parsed Criteo TSV file held in memory.
#[derive(Debug, Clone)]
pub struct CriteoFile {
    path: PathBuf,
    instances: Vec<FeatureId>,
    labels: Vec<u8>,
}

impl CriteoFile {
    pub fn open(path: &Path, vocab: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(path, &text, vocab)
    }

    fn parse(path: &Path, text: &str, vocab: u64) -> Result<Self> {
        let malformed = |line: usize, reason: String| Error::MalformedLine {
            path: path.to_owned(),
            line,
            reason,
        };
        let mut instances = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let expected = 1 + CRITEO_NUMERIC + CRITEO_CATEGORICAL;
            if cols.len() != expected {
                return Err(malformed(
                    line_no,
                    format!("expected {expected} tab-separated columns, found {}", cols.len()),
                ));
            }
            let label = match cols[0] {
                "0" => 0,
                "1" => 1,
                other => return Err(malformed(line_no, format!("label `{other}` is not 0 or 1"))),
            };
            labels.push(label);
            instances.extend(
                cols[1 + CRITEO_NUMERIC..]
                    .iter()
                    .map(|tok| criteo_feature(tok, vocab)),
            );
        }
        if labels.is_empty() {
            return Err(malformed(0, "file contains no rows".into()));
        }
        Ok(Self {
            path: path.to_owned(),
            instances,
            labels,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    /// Rows `step * rows .. (step + 1) * rows`, wrapping at end of file.
    pub fn batch(&self, step: u64, rows: usize) -> RawBatch {
        let total = self.num_rows() as u64;
        let mut instances = Vec::with_capacity(rows * CRITEO_CATEGORICAL);
        let mut labels = Vec::with_capacity(rows);
        for i in 0..rows as u64 {
            let r = ((step * rows as u64 + i) % total) as usize;
            instances.extend_from_slice(
                &self.instances[r * CRITEO_CATEGORICAL..(r + 1) * CRITEO_CATEGORICAL],
            );
            labels.push(self.labels[r]);
        }
        RawBatch::new(CRITEO_CATEGORICAL, instances, labels)
    }
}

/// Reads global batch number `step` of a Criteo file.
pub fn read_criteo_batch(path: &Path, config: &SimConfig, step: u64) -> Result<RawBatch> {
    let file = CriteoFile::open(path, config.vocabulary_size)?;
    Ok(file.batch(step, config.global_batch_size()))
}
