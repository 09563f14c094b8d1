//! Interaction data: ingestion, the bipartite graph and its one-sided
//! projections, ratio splits, and synthetic noise.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Self { user, item }
    }
}

/// Raw identifiers in index order, kept so outputs can be mapped back.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    pub users: Vec<i64>,
    pub items: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    records: Vec<Interaction>,
    ids: Option<Arc<IdMap>>,
}

impl InteractionDataset {
    /// Builds a dataset over a fixed universe, dropping repeated pairs (first
    /// occurrence wins).
    pub fn new(n_users: usize, n_items: usize, records: Vec<Interaction>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut kept = Vec::with_capacity(records.len());
        for r in records {
            if r.user >= n_users || r.item >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "interaction ({}, {}) outside {n_users} users x {n_items} items",
                    r.user, r.item
                )));
            }
            if seen.insert(r) {
                kept.push(r);
            }
        }
        Ok(Self {
            n_users,
            n_items,
            records: kept,
            ids: None,
        })
    }

    pub fn from_pairs(n_users: usize, n_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            n_users,
            n_items,
            pairs.iter().map(|&(u, i)| Interaction::new(u, i)).collect(),
        )
    }

    /// Same universe and id map, different records.
    pub fn with_records(&self, records: Vec<Interaction>) -> Result<Self> {
        let mut out = Self::new(self.n_users, self.n_items, records)?;
        out.ids = self.ids.clone();
        Ok(out)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Option<&IdMap> {
        self.ids.as_deref()
    }

    /// Items of every user, ascending.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for r in &self.records {
            out[r.user].push(r.item);
        }
        for v in &mut out {
            v.sort_unstable();
        }
        out
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.records.contains(&Interaction::new(user, item))
    }
}

/// Reads one interaction per line: two integer tokens separated by
/// whitespace or a comma. Blank lines and lines starting with `#` are
/// skipped. Raw ids are mapped to contiguous indices in first-seen order.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text)
}

pub fn parse_interactions(text: &str) -> Result<InteractionDataset> {
    let mut user_index: HashMap<i64, usize> = HashMap::new();
    let mut item_index: HashMap<i64, usize> = HashMap::new();
    let mut ids = IdMap::default();
    let mut records = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 2 tokens, found {}", tokens.len()),
            });
        }
        let parse = |t: &str| {
            t.parse::<i64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("`{t}` is not an integer"),
            })
        };
        let (raw_user, raw_item) = (parse(tokens[0])?, parse(tokens[1])?);
        let user = *user_index.entry(raw_user).or_insert_with(|| {
            ids.users.push(raw_user);
            ids.users.len() - 1
        });
        let item = *item_index.entry(raw_item).or_insert_with(|| {
            ids.items.push(raw_item);
            ids.items.len() - 1
        });
        records.push(Interaction::new(user, item));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ds = InteractionDataset::new(ids.users.len(), ids.items.len(), records)?;
    ds.ids = Some(Arc::new(ids));
    Ok(ds)
}

/// Writes records as `user item` index pairs, one per line.
pub fn write_interactions(path: impl AsRef<Path>, ds: &InteractionDataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut records = ds.records.clone();
    records.sort_unstable();
    for r in records {
        writeln!(w, "{} {}", r.user, r.item).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `raw_id index` pairs for users and items into two files.
pub fn write_id_maps(
    user_path: impl AsRef<Path>,
    item_path: impl AsRef<Path>,
    ids: &IdMap,
) -> Result<()> {
    for (path, raw) in [
        (user_path.as_ref(), &ids.users),
        (item_path.as_ref(), &ids.items),
    ] {
        let mut body = String::new();
        for (idx, id) in raw.iter().enumerate() {
            body.push_str(&format!("{id} {idx}\n"));
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// Users `0..N` and items `0..M` joined by interaction edges. Node `j` of
/// the joint numbering is user `j` for `j < N` and item `j - N` otherwise.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    /// `N x M`, sorted rows of ones.
    user_adj: CsrMatrix,
    /// `M x N`, the transpose of `user_adj`.
    item_adj: CsrMatrix,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
}

impl BipartiteGraph {
    pub fn build(ds: &InteractionDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let triplets: Vec<_> = ds.records.iter().map(|r| (r.user, r.item, 1.0)).collect();
        let user_adj = CsrMatrix::from_triplets(ds.n_users, ds.n_items, &triplets);
        let item_adj = user_adj.transpose();
        let user_degree = (0..ds.n_users)
            .map(|u| user_adj.row_indices(u).len())
            .collect();
        let item_degree = (0..ds.n_items)
            .map(|i| item_adj.row_indices(i).len())
            .collect();
        Ok(Self {
            n_users: ds.n_users,
            n_items: ds.n_items,
            user_adj,
            item_adj,
            user_degree,
            item_degree,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.user_adj.nnz()
    }

    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        self.user_adj.row_indices(u)
    }

    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        self.item_adj.row_indices(i)
    }

    pub fn user_degree(&self) -> &[usize] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[usize] {
        &self.item_degree
    }

    pub fn degree(&self, side: Side) -> &[usize] {
        match side {
            Side::User => &self.user_degree,
            Side::Item => &self.item_degree,
        }
    }

    pub fn has_edge(&self, u: usize, i: usize) -> bool {
        self.user_neighbors(u).binary_search(&i).is_ok()
    }

    /// Symmetric `(N+M) x (N+M)` 0/1 adjacency of the joint node set.
    pub fn joint_adjacency(&self) -> CsrMatrix {
        let n = self.n_users;
        let mut t = Vec::with_capacity(2 * self.n_edges());
        for u in 0..n {
            for &i in self.user_neighbors(u) {
                t.push((u, n + i, 1.0));
                t.push((n + i, u, 1.0));
            }
        }
        CsrMatrix::from_triplets(self.n_nodes(), self.n_nodes(), &t)
    }

    /// Square 0/1 matrix over one side: `(a, b) = 1` iff `a != b` and the two
    /// share at least one neighbour on the other side.
    pub fn one_sided_adjacency(&self, side: Side) -> CsrMatrix {
        let (own, other, n) = match side {
            Side::User => (&self.user_adj, &self.item_adj, self.n_users),
            Side::Item => (&self.item_adj, &self.user_adj, self.n_items),
        };
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut mark = vec![usize::MAX; n];
        for a in 0..n {
            let start = indices.len();
            for &mid in own.row_indices(a) {
                for &b in other.row_indices(mid) {
                    if b != a && mark[b] != a {
                        mark[b] = a;
                        indices.push(b);
                    }
                }
            }
            indices[start..].sort_unstable();
            indptr.push(indices.len());
        }
        let values = vec![1.0; indices.len()];
        CsrMatrix::from_raw(n, n, indptr, indices, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.2,
            val_fraction: 0.2,
            seed: 2024,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0,1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: InteractionDataset,
    pub validation: InteractionDataset,
    pub test: InteractionDataset,
}

impl Split {
    /// Training plus validation, i.e. everything the model may observe.
    pub fn train_pool(&self) -> InteractionDataset {
        let mut records = self.train.records.clone();
        records.extend_from_slice(&self.validation.records);
        self.train.with_records(records).expect("same universe")
    }
}

/// Round half away from zero.
pub fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Partitions each user's records at random: `train_fraction` of them (at
/// least one) form the training pool and the rest the test set; then
/// `val_fraction` of the pool goes to validation, leaving at least one
/// training record.
pub fn split_by_ratio(ds: &InteractionDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_user: Vec<Vec<Interaction>> = vec![Vec::new(); ds.n_users];
    for &r in &ds.records {
        by_user[r.user].push(r);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut recs in by_user {
        if recs.is_empty() {
            continue;
        }
        recs.shuffle(&mut rng);
        let k = recs.len();
        let pool = round_count(spec.train_fraction * k as f64).clamp(1, k);
        let n_val = round_count(spec.val_fraction * pool as f64).min(pool - 1);
        let n_fit = pool - n_val;
        train.extend_from_slice(&recs[..n_fit]);
        val.extend_from_slice(&recs[n_fit..pool]);
        test.extend_from_slice(&recs[pool..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok(Split {
        train: ds.with_records(train)?,
        validation: ds.with_records(val)?,
        test: ds.with_records(test)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub proportion: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct NoisyTrain {
    pub data: InteractionDataset,
    pub added: usize,
    /// Users that could not receive their full share of noise because too
    /// few unobserved items were left.
    pub skipped_users: usize,
}

/// Adds `round(proportion · k)` random unobserved items to every user with
/// `k` training records. Unobserved means absent from `full`.
pub fn inject_noise(
    train: &InteractionDataset,
    full: &InteractionDataset,
    spec: &NoiseSpec,
) -> Result<NoisyTrain> {
    if !(spec.proportion > 0.0 && spec.proportion < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "noise proportion must lie in (0,1), got {}",
            spec.proportion
        )));
    }
    if train.n_users != full.n_users || train.n_items != full.n_items {
        return Err(Error::InvalidArgument(
            "train and full datasets differ in universe".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let observed = full.items_by_user();
    let train_items = train.items_by_user();
    let mut records = train.records.clone();
    let (mut added, mut skipped) = (0, 0);
    for (u, items) in train_items.iter().enumerate() {
        let want = round_count(spec.proportion * items.len() as f64);
        if want == 0 {
            continue;
        }
        let seen: HashSet<usize> = observed[u].iter().chain(items).copied().collect();
        let candidates: Vec<usize> = (0..full.n_items).filter(|i| !seen.contains(i)).collect();
        if candidates.len() < want {
            skipped += 1;
        }
        let take = want.min(candidates.len());
        for idx in rand::seq::index::sample(&mut rng, candidates.len(), take).into_iter() {
            records.push(Interaction::new(u, candidates[idx]));
            added += 1;
        }
    }
    if skipped > 0 {
        log::warn!("noise injection: {skipped} users had too few unobserved items");
    }
    Ok(NoisyTrain {
        data: train.with_records(records)?,
        added,
        skipped_users: skipped,
    })
}

/// Parameters of the clustered synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub interactions_per_user: usize,
    /// Probability that an interaction stays inside the user's cluster.
    pub in_cluster: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            n_clusters: 4,
            interactions_per_user: 25,
            in_cluster: 0.9,
            seed: 1,
        }
    }
}

/// Users and items are assigned round-robin to latent clusters; each user
/// draws items mostly from its own cluster, with a popularity skew inside
/// the cluster, and occasionally from anywhere.
pub fn synthetic_clusters(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    if spec.n_clusters == 0 || spec.n_items < spec.n_clusters {
        return Err(Error::InvalidArgument(
            "need at least one item per cluster".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters: Vec<Vec<usize>> = (0..spec.n_clusters)
        .map(|c| {
            (0..spec.n_items)
                .filter(|i| i % spec.n_clusters == c)
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    for u in 0..spec.n_users {
        let own = &clusters[u % spec.n_clusters];
        let mut chosen = HashSet::new();
        let budget = spec.interactions_per_user.min(own.len());
        let mut attempts = 0;
        while chosen.len() < budget && attempts < 100 * budget {
            attempts += 1;
            let item = if rng.gen::<f64>() < spec.in_cluster {
                // squared uniform favours the head of the cluster
                let x: f64 = rng.gen();
                own[((x * x) * own.len() as f64) as usize]
            } else {
                rng.gen_range(0..spec.n_items)
            };
            if chosen.insert(item) {
                records.push(Interaction::new(u, item));
            }
        }
    }
    InteractionDataset::new(spec.n_users, spec.n_items, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicates_collapse() {
        let ds = parse_interactions("0 0\n0 0\n1 0\n").unwrap();
        assert_eq!((ds.n_users(), ds.n_items(), ds.len()), (2, 1, 2));
    }

    #[test]
    fn raw_ids_are_remapped_in_first_seen_order() {
        let ds = parse_interactions("# header\n7,10\n\n3 10\n7 4\n").unwrap();
        assert_eq!(ds.ids().unwrap().users, vec![7, 3]);
        assert_eq!(ds.ids().unwrap().items, vec![10, 4]);
        assert_eq!(ds.records()[1], Interaction::new(1, 0));
        assert_eq!(ds.records()[2], Interaction::new(0, 1));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_interactions("1 2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_interactions("1 x\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_interactions("# nothing\n\n"),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn graph_degrees() {
        let g = BipartiteGraph::build(&InteractionDataset::from_pairs(1, 1, &[(0, 0)]).unwrap())
            .unwrap();
        assert_eq!((g.user_degree(), g.item_degree()), (&[1][..], &[1][..]));
        let k22 = InteractionDataset::from_pairs(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let g = BipartiteGraph::build(&k22).unwrap();
        assert!(g
            .user_degree()
            .iter()
            .chain(g.item_degree())
            .all(|&d| d == 2));
    }

    #[test]
    fn one_sided_small_cases() {
        let single =
            BipartiteGraph::build(&InteractionDataset::from_pairs(1, 1, &[(0, 0)]).unwrap())
                .unwrap();
        assert_eq!(single.one_sided_adjacency(Side::User).nnz(), 0);
        let shared = BipartiteGraph::build(
            &InteractionDataset::from_pairs(2, 1, &[(0, 0), (1, 0)]).unwrap(),
        )
        .unwrap();
        let a = shared.one_sided_adjacency(Side::User);
        assert_eq!((a.get(0, 1), a.get(1, 0), a.get(0, 0)), (1.0, 1.0, 0.0));
    }

    #[test]
    fn split_of_ten_records_at_twenty_percent() {
        let pairs: Vec<_> = (0..10).map(|i| (0, i)).collect();
        let ds = InteractionDataset::from_pairs(1, 10, &pairs).unwrap();
        let s = split_by_ratio(&ds, &SplitSpec::default()).unwrap();
        assert_eq!(s.train.len() + s.validation.len(), 2);
        assert!(s.train.len() >= 1);
        assert_eq!(s.test.len(), 8);
    }

    #[test]
    fn single_record_user_keeps_training_record() {
        let ds = InteractionDataset::from_pairs(2, 3, &[(0, 0), (1, 1), (1, 2)]).unwrap();
        let s = split_by_ratio(&ds, &SplitSpec::default()).unwrap();
        assert!(s.train.records().iter().any(|r| r.user == 0));
        assert!(s.train.records().iter().any(|r| r.user == 1));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = InteractionDataset::from_pairs(1, 1, &[(0, 0)]).unwrap();
        let spec = SplitSpec {
            train_fraction: 1.0,
            ..Default::default()
        };
        assert!(split_by_ratio(&ds, &spec).is_err());
    }

    #[test]
    fn noise_amounts_follow_rounding() {
        let mut pairs: Vec<_> = (0..10).map(|i| (0, i)).collect();
        pairs.push((1, 0));
        let full = InteractionDataset::from_pairs(2, 40, &pairs).unwrap();
        let noisy = inject_noise(
            &full,
            &full,
            &NoiseSpec {
                proportion: 0.1,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(noisy.added, 1);
        assert!(noisy.data.records().iter().filter(|r| r.user == 1).count() == 1);
        let noisy = inject_noise(
            &full,
            &full,
            &NoiseSpec {
                proportion: 0.3,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(noisy.added, 3);
    }

    #[test]
    fn saturated_user_is_skipped() {
        let full = InteractionDataset::from_pairs(1, 3, &[(0, 0), (0, 1), (0, 2)]).unwrap();
        let noisy = inject_noise(
            &full,
            &full,
            &NoiseSpec {
                proportion: 0.3,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!((noisy.added, noisy.skipped_users), (0, 1));
    }

    #[test]
    fn writes_round_trip_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let ds = parse_interactions("5 9\n5 8\n6 9\n").unwrap();
        let path = dir.path().join("out.txt");
        write_interactions(&path, &ds).unwrap();
        let back = load_interactions(&path).unwrap();
        assert_eq!(back.len(), 3);
        write_id_maps(
            dir.path().join("u.map"),
            dir.path().join("i.map"),
            ds.ids().unwrap(),
        )
        .unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("u.map")).unwrap(),
            "5 0\n6 1\n"
        );
    }

    fn random_dataset() -> impl Strategy<Value = InteractionDataset> {
        (
            1usize..12,
            1usize..12,
            prop::collection::vec((0usize..12, 0usize..12), 1..80),
        )
            .prop_map(|(n, m, pairs)| {
                let pairs: Vec<_> = pairs.into_iter().map(|(u, i)| (u % n, i % m)).collect();
                InteractionDataset::from_pairs(n, m, &pairs).unwrap()
            })
    }

    proptest! {
        #[test]
        fn adjacency_lists_are_mutual_transposes(ds in random_dataset()) {
            let g = BipartiteGraph::build(&ds).unwrap();
            for u in 0..g.n_users() {
                prop_assert!(g.user_neighbors(u).windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(g.user_degree()[u], g.user_neighbors(u).len());
                for &i in g.user_neighbors(u) {
                    prop_assert!(g.item_neighbors(i).contains(&u));
                }
            }
            for i in 0..g.n_items() {
                for &u in g.item_neighbors(i) {
                    prop_assert!(g.user_neighbors(u).contains(&i));
                }
            }
        }

        #[test]
        fn split_partitions_and_is_deterministic(ds in random_dataset(), seed in 0u64..1000, tf in 0.1f64..0.9) {
            let spec = SplitSpec { train_fraction: tf, val_fraction: 0.2, seed };
            let a = split_by_ratio(&ds, &spec).unwrap();
            let b = split_by_ratio(&ds, &spec).unwrap();
            prop_assert_eq!(a.train.records(), b.train.records());
            prop_assert_eq!(a.test.records(), b.test.records());
            let mut all: Vec<_> = a.train.records().iter()
                .chain(a.validation.records()).chain(a.test.records()).copied().collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            let mut orig = ds.records().to_vec();
            orig.sort_unstable();
            prop_assert_eq!(all, orig);
            for u in 0..ds.n_users() {
                if ds.records().iter().any(|r| r.user == u) {
                    prop_assert!(a.train.records().iter().any(|r| r.user == u));
                }
            }
        }

        #[test]
        fn one_sided_adjacency_is_symmetric_with_zero_diagonal(ds in random_dataset()) {
            let g = BipartiteGraph::build(&ds).unwrap();
            for side in [Side::User, Side::Item] {
                let a = g.one_sided_adjacency(side);
                prop_assert!(a.is_symmetric(0.0));
                for r in 0..a.n_rows() {
                    prop_assert_eq!(a.get(r, r), 0.0);
                }
            }
        }

        #[test]
        fn injected_noise_is_never_observed(ds in random_dataset(), seed in 0u64..100) {
            let noisy = inject_noise(&ds, &ds, &NoiseSpec { proportion: 0.3, seed }).unwrap();
            let extra = &noisy.data.records()[ds.len()..];
            prop_assert_eq!(extra.len(), noisy.added);
            for r in extra {
                prop_assert!(!ds.contains(r.user, r.item));
            }
        }
    }
}
