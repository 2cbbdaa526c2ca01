//! Small synthetic interaction sets with known structure.

use rand::seq::SliceRandom;

use super::{Interaction, InteractionSet};
use crate::rng::{substream, Stream};

/// Two disjoint communities. Users `u` with `u % 2 == c` only touch items of
/// cluster `c` (item IDs `[c·m, (c+1)·m)` with `m = n_items / 2`). Inside a
/// cluster, items sit on a ring and each user interacts with `per_user`
/// consecutive ring positions starting at an offset; offsets are spread
/// evenly over the ring and dealt to users in seeded random order.
pub fn two_cluster(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> InteractionSet {
    assert!(n_users >= 2 && n_items >= 2, "need at least one user and item per cluster");
    let per_cluster = n_items / 2;
    assert!(per_user <= per_cluster, "per_user exceeds cluster size");
    let mut rng = substream(seed, Stream::Init, u32::MAX);
    let mut pairs = Vec::with_capacity(n_users * per_user);
    for cluster in 0..2 {
        let members: Vec<usize> = (cluster..n_users).step_by(2).collect();
        let mut offsets: Vec<usize> = (0..members.len()).map(|j| j * per_cluster / members.len()).collect();
        offsets.shuffle(&mut rng);
        for (&user, &offset) in members.iter().zip(&offsets) {
            for step in 0..per_user {
                let item = cluster * per_cluster + (offset + step) % per_cluster;
                pairs.push(Interaction::new(user as u32, item as u32));
            }
        }
    }
    pairs.sort_by_key(|p| (p.user, p.item));
    InteractionSet::from_pairs(n_users, 2 * per_cluster, pairs).expect("generator emits unique in-range pairs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_coverage() {
        let data = two_cluster(200, 100, 10, 0);
        assert_eq!((data.n_users(), data.n_items(), data.len()), (200, 100, 2000));
        assert!(data.is_covering());
        for p in data.pairs() {
            assert_eq!(p.user % 2, p.item / 50);
        }
        assert!(data.item_pop().iter().all(|&p| p >= 5));
        assert_eq!(two_cluster(200, 100, 10, 0), data);
    }
}
