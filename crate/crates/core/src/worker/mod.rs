//! Worker-side training step.
//!
//! Every worker builds a local common embedding over the unique features of
//! the global batch (zeros for rows it does not own), the all-reduce sums
//! them, each worker recovers its own rows through the virtual ids, runs
//! forward/backward, folds the per-entry gradients back onto the unique
//! features, and a second all-reduce sums those. Each worker then applies
//! Adam to the features it owns.
//!
//! All-reduces are simulated as summation in worker order `0..W`, so results
//! are reproducible bit for bit.

mod adam;
mod model;

use fnv::FnvHashMap;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};

pub use adam::{adam_step, sparse_adam_step, DenseAdam};
pub use model::{sigmoid, DeepFmLite, ForwardBackward, P_CLAMP};

use crate::comm::{allreduce_bytes, plain_bytes, LedgerSnapshot};
use crate::config::AdamConfig;
use crate::dataio::DedupBatch;
use crate::error::{Error, Result};
use crate::hostmgr::{shard_owner, CacheBuffer, HostStore, ParamState};
use crate::ids::{FeatureId, VirtualId};

/// Sums the local common embeddings of all workers.
///
/// Returns the global common embedding and the all-reduce traffic of all
/// workers together.
pub fn forward_embeddings(locals: &[Array2<f64>]) -> (Array2<f64>, LedgerSnapshot) {
    let (sum, payload) = ordered_sum(locals);
    let traffic = LedgerSnapshot {
        interworker_bytes: locals.len() as u64 * allreduce_bytes(payload, locals.len()),
        ..Default::default()
    };
    (sum, traffic)
}

fn ordered_sum(locals: &[Array2<f64>]) -> (Array2<f64>, u64) {
    let first = locals.first().expect("all-reduce over zero workers");
    let mut sum = first.clone();
    for m in &locals[1..] {
        assert_eq!(m.dim(), first.dim(), "all-reduce shape mismatch across workers");
        sum += m;
    }
    let payload = plain_bytes(first.len() as u64);
    (sum, payload)
}

/// Recovers the embeddings of `worker`'s rows: entry `(row, field)` is
/// `global[virtual_ids[row][field]]`.
pub fn gather_instances(global: ArrayView2<'_, f64>, dedup: &DedupBatch, worker: usize) -> Array3<f64> {
    let rows = dedup.worker_row_ranges[worker].len();
    let dim = global.ncols();
    let vids = dedup.worker_virtual_ids(worker);
    let mut out = Array3::zeros((rows, dedup.num_fields, dim));
    let flat = out.as_slice_mut().expect("fresh array is contiguous");
    for (chunk, v) in flat.chunks_exact_mut(dim).zip(vids) {
        chunk.copy_from_slice(global.row(v.index()).as_slice().expect("row-major global"));
    }
    out
}

/// Unsorted segment sum: row `k` of the result is the sum of every gradient
/// entry whose virtual id is `k`.
pub fn segment_sum(grads: ArrayView3<'_, f64>, virtual_ids: &[VirtualId], num_unique: usize) -> Array2<f64> {
    let (rows, fields, dim) = grads.dim();
    assert_eq!(rows * fields, virtual_ids.len(), "one virtual id per gradient entry");
    let grads = grads.as_standard_layout();
    let mut out = Array2::zeros((num_unique, dim));
    let flat = grads.as_slice().expect("standard layout");
    for (g, v) in flat.chunks_exact(dim).zip(virtual_ids) {
        let mut row = out.row_mut(v.index());
        for (o, x) in row.iter_mut().zip(g) {
            *o += x;
        }
    }
    out
}

/// Sums local common gradients and averages dense gradients over workers.
pub fn grad_synchronize(
    local_common: &[Array2<f64>],
    dense: &[Array1<f64>],
) -> (Array2<f64>, Array1<f64>, LedgerSnapshot) {
    assert_eq!(local_common.len(), dense.len(), "one gradient set per worker");
    let workers = local_common.len();
    let (global, payload) = ordered_sum(local_common);
    let mut mean = dense[0].clone();
    for g in &dense[1..] {
        assert_eq!(g.len(), mean.len(), "dense gradient shape mismatch across workers");
        mean += g;
    }
    mean /= workers as f64;
    let per_worker = allreduce_bytes(payload, workers) + allreduce_bytes(plain_bytes(mean.len() as u64), workers);
    let traffic = LedgerSnapshot {
        interworker_bytes: workers as u64 * per_worker,
        ..Default::default()
    };
    (global, mean, traffic)
}

/// Somewhere a worker can update its owned features in place.
pub trait SparseParams {
    fn owned_state(&mut self, f: FeatureId) -> Option<&mut ParamState>;

    /// Called once a feature's update for the current batch is done.
    fn finish(&mut self, _f: FeatureId) {}
}

impl SparseParams for CacheBuffer {
    fn owned_state(&mut self, f: FeatureId) -> Option<&mut ParamState> {
        self.state_mut(f)
    }

    fn finish(&mut self, f: FeatureId) {
        self.unpin(f);
    }
}

impl SparseParams for HostStore {
    fn owned_state(&mut self, f: FeatureId) -> Option<&mut ParamState> {
        Some(self.state_mut(f))
    }
}

impl SparseParams for FnvHashMap<FeatureId, ParamState> {
    fn owned_state(&mut self, f: FeatureId) -> Option<&mut ParamState> {
        self.get_mut(&f)
    }
}

/// Applies one lazy Adam step to every feature of the batch owned by
/// `worker`, using row `k` of `global_grads` for `global_ids[k]`.
/// Returns the number of features updated.
pub fn update_sparse<P: SparseParams + ?Sized>(
    params: &mut P,
    worker: usize,
    workers: usize,
    global_ids: &[FeatureId],
    global_grads: ArrayView2<'_, f64>,
    adam: &AdamConfig,
) -> Result<usize> {
    assert_eq!(global_ids.len(), global_grads.nrows());
    let mut updated = 0;
    for (k, &f) in global_ids.iter().enumerate() {
        if shard_owner(f, workers) != worker {
            continue;
        }
        let state = params.owned_state(f).ok_or(Error::NotResident {
            worker,
            feature: f.get(),
        })?;
        sparse_adam_step(adam, state, global_grads.row(k).as_slice().expect("row-major grads"));
        params.finish(f);
        updated += 1;
    }
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{virtual_sparse_id, RawBatch};
    use crate::hostmgr::push_parameters_to_cache;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u64]) -> Vec<FeatureId> {
        v.iter().copied().map(FeatureId::new).collect()
    }

    #[test]
    fn forward_example_two_workers() {
        let (e1, e3, e2) = ([1.0, 2.0], [3.0, 4.0], [5.0, 6.0]);
        let w0 = Array2::from(vec![e1, e3, [0.0, 0.0]]);
        let w1 = Array2::from(vec![[0.0, 0.0], [0.0, 0.0], e2]);
        let (global, traffic) = forward_embeddings(&[w0, w1]);
        assert_eq!(global, Array2::from(vec![e1, e3, e2]));
        // Payload 3 x 2 x 4 bytes = 24, per-worker ring cost 24, two workers.
        assert_eq!(traffic.interworker_bytes, 48);

        let dedup = virtual_sparse_id(&RawBatch::from_rows(&[[1, 3, 2], [2, 3, 1]]), 2);
        let r0 = gather_instances(global.view(), &dedup, 0);
        let r1 = gather_instances(global.view(), &dedup, 1);
        assert_eq!(r0, Array3::from(vec![[e1, e3, e2]]));
        assert_eq!(r1, Array3::from(vec![[e2, e3, e1]]));
    }

    #[test]
    fn single_worker_all_reduce_is_identity() {
        let m = array![[1.5, -2.0], [0.25, 8.0]];
        let (g, t) = forward_embeddings(&[m.clone()]);
        assert_eq!(g, m);
        assert_eq!(t.interworker_bytes, 0);
    }

    #[test]
    fn partitioned_matrix_reassembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = Array::from_shape_fn((40, 5), |_| rng.random_range(-1.0..1.0));
        let mut parts = vec![Array2::zeros((40, 5)); 4];
        for r in 0..40 {
            let w = rng.random_range(0..4);
            parts[w].row_mut(r).assign(&full.row(r));
        }
        assert_eq!(forward_embeddings(&parts).0, full);
    }

    #[test]
    fn gather_instances_edge_cases() {
        let global = array![[1.0], [2.0], [3.0]];
        let identity = virtual_sparse_id(&RawBatch::from_rows(&[[7, 8, 9]]), 1);
        let out = gather_instances(global.view(), &identity, 0);
        assert_eq!(out.into_shape_with_order((3, 1)).unwrap(), global);

        let dup = virtual_sparse_id(&RawBatch::from_rows(&[[7, 7]]), 1);
        let out = gather_instances(global.view(), &dup, 0);
        assert_eq!(out, array![[[1.0], [1.0]]]);
    }

    #[test]
    fn segment_sum_examples() {
        let g = array![[[1.0, 1.5], [3.0, 3.5], [2.0, 2.5]]];
        let vids: Vec<VirtualId> = [0, 1, 2].map(VirtualId::new).to_vec();
        assert_eq!(segment_sum(g.view(), &vids, 3), array![[1.0, 1.5], [3.0, 3.5], [2.0, 2.5]]);

        let g = array![[[1.0], [2.0]]];
        let vids = [VirtualId::new(0), VirtualId::new(0)];
        assert_eq!(segment_sum(g.view(), &vids, 2), array![[3.0], [0.0]]);
    }

    #[test]
    fn segment_sum_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (rows, fields, dim, uniq) = (rng.random_range(1..9), rng.random_range(1..5), 3, rng.random_range(1..12));
            let g = Array3::from_shape_fn((rows, fields, dim), |_| rng.random_range(-1.0..1.0));
            let vids: Vec<VirtualId> = (0..rows * fields).map(|_| VirtualId::new(rng.random_range(0..uniq))).collect();
            let got = segment_sum(g.view(), &vids, uniq as usize);
            let mut want = Array2::<f64>::zeros((uniq as usize, dim));
            for k in 0..uniq as usize {
                for r in 0..rows {
                    for f in 0..fields {
                        if vids[r * fields + f].index() == k {
                            for c in 0..dim {
                                want[[k, c]] += g[[r, f, c]];
                            }
                        }
                    }
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn grad_sync_sums_embeddings_and_averages_dense() {
        let a = array![[1.0], [3.0], [2.0]];
        let b = array![[10.0], [30.0], [20.0]];
        let (g, dense, t) = grad_synchronize(&[a.clone(), b.clone()], &[array![2.0, 4.0], array![4.0, 8.0]]);
        assert_eq!(g, a + b);
        assert_eq!(dense, array![3.0, 6.0]);
        assert_eq!(t.interworker_bytes, 2 * (12 + 8));

        let (g, dense, _) = grad_synchronize(&[array![[1.0, 2.0]]], &[array![5.0]]);
        assert_eq!(g, array![[1.0, 2.0]]);
        assert_eq!(dense, array![5.0]);
    }

    #[test]
    fn grad_sync_is_serial_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let locals: Vec<Array2<f64>> = (0..4)
            .map(|_| Array::from_shape_fn((17, 4), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let dense: Vec<Array1<f64>> = (0..4).map(|_| Array::from_shape_fn(6, |_| rng.random::<f64>())).collect();
        let (g, _, _) = grad_synchronize(&locals, &dense);
        for r in 0..17 {
            for c in 0..4 {
                let serial = ((locals[0][[r, c]] + locals[1][[r, c]]) + locals[2][[r, c]]) + locals[3][[r, c]];
                assert_eq!(g[[r, c]].to_bits(), serial.to_bits());
            }
        }
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn all_reduce_rejects_mismatched_shapes() {
        forward_embeddings(&[Array2::zeros((2, 2)), Array2::zeros((3, 2))]);
    }

    #[test]
    fn update_touches_only_owned_features_and_unpins() {
        let adam = AdamConfig::default();
        let mut host = HostStore::new(2, 4);
        let mut w0 = CacheBuffer::new(0, 4);
        let mut w1 = CacheBuffer::new(1, 4);
        push_parameters_to_cache(&mut host, &mut w0, &ids(&[2])).unwrap();
        push_parameters_to_cache(&mut host, &mut w1, &ids(&[1, 3])).unwrap();
        for f in ids(&[1, 3]) {
            w1.pin(f);
        }
        w0.pin(FeatureId::new(2));
        let g = ids(&[1, 3, 2]);
        let grads = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let before2 = w0.embedding(g[2]).unwrap().to_vec();
        assert_eq!(update_sparse(&mut w1, 1, 2, &g, grads.view(), &adam).unwrap(), 2);
        assert_eq!(w0.embedding(g[2]).unwrap(), &before2[..]);
        assert!(!w1.is_pinned(g[0]) && !w1.is_pinned(g[1]));
        assert_eq!(update_sparse(&mut w0, 0, 2, &g, grads.view(), &adam).unwrap(), 1);
        for (a, b) in w0.embedding(g[2]).unwrap().iter().zip(&before2) {
            assert!((b - a - 0.001 / (1.0 + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn update_of_missing_owned_feature_is_an_error() {
        let mut buf = CacheBuffer::new(0, 2);
        let err = update_sparse(&mut buf, 0, 1, &ids(&[4]), array![[0.0]].view(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotResident { worker: 0, feature: 4 }));
    }
}
