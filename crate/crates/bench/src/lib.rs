//! Shared fixtures for the criterion benches.

use aurec_core::dataset::{split, synthetic::two_cluster, DatasetSplit, SplitRatios};
use aurec_core::encoder::{init_xavier, EmbeddingTable};

/// Two-cluster interactions with `n_users` users and a Xavier table of width `d`.
pub fn fixture(n_users: usize, n_items: usize, per_user: usize, d: usize) -> (DatasetSplit, EmbeddingTable) {
    let data = two_cluster(n_users, n_items, per_user, 7);
    let s = split(&data, SplitRatios::default(), 7).expect("valid split");
    let table = init_xavier(s.n_users(), s.n_items(), d, 7);
    (s, table)
}
