//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use ctrsim::config::{AdamConfig, SimConfig};
use ctrsim::dataio::{generate_batch, RawBatch};
use ctrsim::hostmgr::{
    manager_get, owned_by, pull_parameters_to_host, push_parameters_to_cache, shard_owner,
    CacheBuffer, HostStore, Location, ParamState,
};
use ctrsim::worker::DeepFmLite;
use ctrsim::FeatureId;
use fnv::FnvHashSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-table, single-lane trainer written from the model definition with
/// plain loops: no sharding, no cache, no all-reduce, no ndarray.
pub struct ReferenceTrainer {
    fields: usize,
    dim: usize,
    hidden: usize,
    seed: u64,
    adam: AdamConfig,
    pub table: HashMap<u64, ParamState>,
    pub dense: Vec<f64>,
    dense_m: Vec<f64>,
    dense_v: Vec<f64>,
    dense_t: u64,
}

impl ReferenceTrainer {
    pub fn new(config: &SimConfig) -> Self {
        let dense = DeepFmLite::init(config.seed, config.num_fields, config.embedding_dim, config.hidden_units)
            .params()
            .to_vec();
        let n = dense.len();
        Self {
            fields: config.num_fields,
            dim: config.embedding_dim,
            hidden: config.hidden_units,
            seed: config.seed,
            adam: config.adam,
            table: HashMap::new(),
            dense,
            dense_m: vec![0.0; n],
            dense_v: vec![0.0; n],
            dense_t: 0,
        }
    }

    fn embedding(&mut self, f: FeatureId) -> Vec<f64> {
        let (seed, dim) = (self.seed, self.dim);
        self.table
            .entry(f.get())
            .or_insert_with(|| ParamState::init(seed, f, dim))
            .embedding
            .clone()
    }

    /// One full-batch step; returns the mean loss before the update.
    pub fn step(&mut self, batch: &RawBatch) -> f64 {
        let (fl, d, h) = (self.fields, self.dim, self.hidden);
        let input = fl * d;
        let rows = batch.num_rows();
        let w1 = 0;
        let b1 = h * input;
        let w2 = b1 + h;
        let b2 = w2 + h;

        let mut loss = 0.0;
        let mut dense_grad = vec![0.0; self.dense.len()];
        let mut emb_grad: HashMap<u64, Vec<f64>> = HashMap::new();
        for r in 0..rows {
            let ids = batch.row(r).to_vec();
            let x: Vec<f64> = ids.iter().flat_map(|&f| self.embedding(f)).collect();
            let mut pre = vec![0.0; h];
            for j in 0..h {
                let mut acc = self.dense[b1 + j];
                for i in 0..input {
                    acc += self.dense[w1 + j * input + i] * x[i];
                }
                pre[j] = acc;
            }
            let mut mlp = self.dense[b2];
            for j in 0..h {
                mlp += self.dense[w2 + j] * pre[j].max(0.0);
            }
            // Pairwise form of the second-order term.
            let mut fm = 0.0;
            for a in 0..fl {
                for b in a + 1..fl {
                    for k in 0..d {
                        fm += x[a * d + k] * x[b * d + k];
                    }
                }
            }
            let z = fm + mlp;
            let p = 1.0 / (1.0 + (-z).exp());
            let y = f64::from(batch.labels()[r]);
            let pc = p.clamp(1e-7, 1.0 - 1e-7);
            loss += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            let dz = if p < 1e-7 || p > 1.0 - 1e-7 { 0.0 } else { (p - y) / rows as f64 };

            dense_grad[b2] += dz;
            let mut dx = vec![0.0; input];
            for j in 0..h {
                let act = pre[j].max(0.0);
                dense_grad[w2 + j] += dz * act;
                if pre[j] > 0.0 {
                    let dpre = dz * self.dense[w2 + j];
                    dense_grad[b1 + j] += dpre;
                    for i in 0..input {
                        dense_grad[w1 + j * input + i] += dpre * x[i];
                        dx[i] += dpre * self.dense[w1 + j * input + i];
                    }
                }
            }
            for a in 0..fl {
                for k in 0..d {
                    let others: f64 = (0..fl).filter(|&b| b != a).map(|b| x[b * d + k]).sum();
                    dx[a * d + k] += dz * others;
                }
            }
            for (a, f) in ids.iter().enumerate() {
                let g = emb_grad.entry(f.get()).or_insert_with(|| vec![0.0; d]);
                for k in 0..d {
                    g[k] += dx[a * d + k];
                }
            }
        }

        let cfg = self.adam;
        for (f, g) in emb_grad {
            let s = self.table.get_mut(&f).expect("touched feature exists");
            s.steps += 1;
            adam(&cfg, s.steps, &mut s.embedding, &mut s.momentum, &mut s.velocity, &g);
        }
        self.dense_t += 1;
        adam(&cfg, self.dense_t, &mut self.dense, &mut self.dense_m, &mut self.dense_v, &dense_grad);
        loss / rows as f64
    }
}

fn adam(cfg: &AdamConfig, t: u64, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        p[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
    }
}

/// Largest absolute difference between the reference and a simulator run of
/// `steps` steps, over losses, embeddings, optimizer state and dense weights.
pub fn reference_gap(config: &SimConfig, steps: u64) -> f64 {
    let exec = ctrsim::Simulator::new(config.clone()).unwrap().execute(steps).unwrap();
    let mut reference = ReferenceTrainer::new(config);
    let mut gap: f64 = 0.0;
    for (t, rec) in exec.report.records.iter().enumerate() {
        let loss = reference.step(&generate_batch(config, t as u64));
        gap = gap.max((loss - rec.loss).abs());
    }
    let sim = exec.host.sorted_states();
    assert_eq!(sim.len(), reference.table.len(), "same features touched");
    for (f, s) in sim {
        let r = &reference.table[&f.get()];
        assert_eq!(s.steps, r.steps, "feature {f} update count");
        for (a, b) in s
            .embedding
            .iter()
            .chain(&s.momentum)
            .chain(&s.velocity)
            .zip(r.embedding.iter().chain(&r.momentum).chain(&r.velocity))
        {
            gap = gap.max((a - b).abs());
        }
    }
    for (a, b) in exec.dense[0].iter().zip(&reference.dense) {
        gap = gap.max((a - b).abs());
    }
    gap
}

/// Worst relative error between analytic and central-difference gradients
/// over `instances` random tiny models (F = 2, d = 2, h = 3).
pub fn finite_difference_worst(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, d, h, rows) = (2, 2, 3, 3);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let params = ndarray::Array1::from_shape_fn(DeepFmLite::num_dense_params(f, d, h), |_| rng.random_range(-1.0..1.0));
        let model = DeepFmLite::from_params(f, d, h, params.clone());
        let e = ndarray::Array3::from_shape_fn((rows, f, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..=1)).collect();
        let out = model.forward_backward(e.view(), &labels);
        let loss_at = |m: &DeepFmLite, x: &ndarray::Array3<f64>| m.forward_backward(x.view(), &labels).loss;
        for idx in 0..e.len() {
            let (mut plus, mut minus) = (e.clone(), e.clone());
            plus.as_slice_mut().unwrap()[idx] += eps;
            minus.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss_at(&model, &plus) - loss_at(&model, &minus)) / (2.0 * eps);
            worst = worst.max(rel_err(out.embedding_grads.as_slice().unwrap()[idx], num));
        }
        for idx in 0..params.len() {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus[idx] += eps;
            minus[idx] -= eps;
            let num = (loss_at(&DeepFmLite::from_params(f, d, h, plus), &e)
                - loss_at(&DeepFmLite::from_params(f, d, h, minus), &e))
                / (2.0 * eps);
            worst = worst.max(rel_err(out.dense_grads[idx], num));
        }
    }
    worst
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Counters of one randomized admission/eviction schedule.
#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub batches: usize,
    pub skipped: usize,
    pub evictions: usize,
}

/// Drives the manager protocol with random batches, random lookahead depth,
/// random capacities and random training completion times. Every eviction
/// is checked against the pin and lookahead rules before it happens, and
/// residency conservation is checked after every step. The buffer's own
/// assertions stay armed as well.
pub fn eviction_schedule(seed: u64) -> Result<FuzzStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workers = rng.random_range(1..=3usize);
    let capacity = rng.random_range(2..=10usize);
    let lookahead = rng.random_range(1..=3usize);
    let vocab = rng.random_range(2..=(4 * capacity * workers) as u64);
    let steps = rng.random_range(5..=25usize);
    let batches: Vec<Vec<FeatureId>> = (0..steps + lookahead)
        .map(|_| {
            let len = rng.random_range(1..=capacity * workers);
            let mut seen = HashSet::new();
            (0..len)
                .map(|_| FeatureId::new(rng.random_range(0..vocab)))
                .filter(|f| seen.insert(*f))
                .collect()
        })
        .collect();

    let mut host = HostStore::new(2, seed);
    let mut bufs: Vec<CacheBuffer> = (0..workers).map(|w| CacheBuffer::new(w, capacity)).collect();
    let mut in_flight: VecDeque<Vec<FeatureId>> = VecDeque::new();
    let mut stats = FuzzStats::default();

    let finish_oldest = |in_flight: &mut VecDeque<Vec<FeatureId>>, bufs: &mut [CacheBuffer]| {
        let done = in_flight.pop_front().expect("something in flight");
        for f in done {
            bufs[shard_owner(f, workers)].unpin(f);
        }
    };

    for t in 0..steps {
        while in_flight.len() > lookahead || (!in_flight.is_empty() && rng.random_bool(0.3)) {
            finish_oldest(&mut in_flight, &mut bufs);
        }
        let current = &batches[t];
        let ahead: Vec<&[FeatureId]> = batches[t + 1..=t + lookahead].iter().map(Vec::as_slice).collect();
        let protected: FnvHashSet<FeatureId> = current.iter().chain(ahead.iter().flat_map(|b| b.iter())).copied().collect();
        let admissions = loop {
            let busy: FnvHashSet<FeatureId> = in_flight.iter().flatten().copied().collect();
            match manager_get(&mut bufs, current, &ahead, &busy) {
                Ok(a) => break Some(a),
                Err(_) if in_flight.is_empty() => break None,
                Err(_) => finish_oldest(&mut in_flight, &mut bufs),
            }
        };
        let Some(admissions) = admissions else {
            stats.skipped += 1;
            continue;
        };
        let busy: FnvHashSet<FeatureId> = in_flight.iter().flatten().copied().collect();
        for (buf, adm) in bufs.iter_mut().zip(&admissions) {
            for &f in &adm.noworking {
                if buf.is_pinned(f) || busy.contains(&f) {
                    return Err(format!("seed {seed} step {t}: evicting in-flight feature {f}"));
                }
                if buf.is_needed_soon(f) || protected.contains(&f) {
                    return Err(format!("seed {seed} step {t}: evicting lookahead feature {f}"));
                }
            }
            stats.evictions += adm.noworking.len();
            pull_parameters_to_host(&mut host, buf, &adm.noworking);
            push_parameters_to_cache(&mut host, buf, &adm.working).map_err(|e| format!("seed {seed}: {e}"))?;
            for f in owned_by(current, buf.worker(), workers) {
                buf.pin(f);
                buf.touch(f);
            }
            buf.check_consistency();
        }
        in_flight.push_back(current.clone());
        stats.batches += 1;

        for f in (0..vocab).map(FeatureId::new) {
            let holders: Vec<usize> = bufs.iter().filter(|b| b.is_resident(f)).map(|b| b.worker()).collect();
            let ok = match host.location(f) {
                Location::Worker(w) => holders == [w] && w == shard_owner(f, workers),
                Location::Host | Location::Untouched => holders.is_empty(),
            };
            if !ok {
                return Err(format!("seed {seed} step {t}: feature {f} held by {holders:?}, host says {:?}", host.location(f)));
            }
        }
    }
    Ok(stats)
}
