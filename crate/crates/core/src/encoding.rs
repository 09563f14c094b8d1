//! Node positional encodings on the user–item graph.
//!
//! Four encodings are combined per node `j`:
//!
//! * spectral: Laplacian eigenvectors of the joint graph, optionally blended
//!   with eigenvectors of the user-side and item-side projection graphs
//!   (fixed, never trained);
//! * degree: a learned row per degree group, one table per side;
//! * pagerank: a learned row per PageRank group, one table per side;
//! * type: one learned row for items, one for users.
//!
//! Each encoding is mapped to the embedding width by its own matrix, the
//! mapped terms are summed, and a side-specific `d x d` matrix produces the
//! node position `P_j`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BipartiteGraph, Side};
use crate::error::{Error, Result};
use crate::numerics::{
    pagerank, symmetric_eigs_smallest, CsrMatrix, DenseMatrix, EigenOptions, PageRankOptions,
    ParamId, ParamStore, Tape, Var,
};

/// Eigenvalues below this are treated as trivial (one per connected
/// component).
pub const TRIVIAL_EIGENVALUE: f64 = 1e-8;

/// Which encodings participate; a disabled encoding has no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingFlags {
    pub spectral: bool,
    pub degree: bool,
    pub pagerank: bool,
    pub node_type: bool,
}

impl EncodingFlags {
    pub const ALL: Self = Self {
        spectral: true,
        degree: true,
        pagerank: true,
        node_type: true,
    };
    pub const NONE: Self = Self {
        spectral: false,
        degree: false,
        pagerank: false,
        node_type: false,
    };

    pub fn any(&self) -> bool {
        self.spectral || self.degree || self.pagerank || self.node_type
    }

    /// Clears one encoding by its short label: `pl`, `dg`, `pr` or `tp`.
    pub fn disable(&mut self, label: &str) -> Result<()> {
        match label {
            "pl" => self.spectral = false,
            "dg" => self.degree = false,
            "pr" => self.pagerank = false,
            "tp" => self.node_type = false,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown encoding `{other}`"
                )))
            }
        }
        Ok(())
    }
}

impl Default for EncodingFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub h_c: usize,
    pub h_d: usize,
    pub h_r: usize,
    pub h_y: usize,
    pub n_d: usize,
    pub n_r: usize,
    pub lambda_c: f64,
    pub flags: EncodingFlags,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            h_c: 50,
            h_d: 4,
            h_r: 4,
            h_y: 4,
            n_d: 10,
            n_r: 10,
            lambda_c: 0.0,
            flags: EncodingFlags::ALL,
        }
    }
}

/// Fixed spectral coordinates, one row per node (users then items).
#[derive(Clone, Debug)]
pub struct SpectralEncoding {
    pub matrix: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub side: Side,
    pub n_groups: usize,
    pub group_of: Vec<usize>,
}

impl GroupAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }
}

/// `D^{-1/2} (D − A) D^{-1/2}`; rows of isolated nodes are zero.
pub fn normalized_laplacian(adj: &CsrMatrix) -> CsrMatrix {
    let n = adj.n_rows();
    let degree: Vec<f64> = (0..n).map(|r| adj.row_values(r).iter().sum()).collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut triplets = Vec::with_capacity(adj.nnz() + n);
    for r in 0..n {
        if degree[r] > 0.0 {
            triplets.push((r, r, 1.0));
        }
        for (c, v) in adj.row_iter(r) {
            if c != r {
                triplets.push((r, c, -v * inv_sqrt[r] * inv_sqrt[c]));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Eigenvectors of the `k` smallest non-trivial eigenvalues of the
/// normalized Laplacian of `adj`, one row per node.
pub fn laplacian_eigenvectors(
    adj: &CsrMatrix,
    k: usize,
    graph: &'static str,
    opts: &EigenOptions,
) -> Result<DenseMatrix> {
    let n = adj.n_rows();
    let laplacian = normalized_laplacian(adj);
    let components = count_components(adj);
    let want = (k + components).min(n);
    let pairs = symmetric_eigs_smallest(&laplacian, want, opts)?;
    let keep: Vec<usize> = (0..pairs.values.len())
        .filter(|&j| pairs.values[j] >= TRIVIAL_EIGENVALUE)
        .take(k)
        .collect();
    if keep.len() < k {
        return Err(Error::SpectrumDeficit {
            graph,
            requested: k,
            available: keep.len(),
        });
    }
    Ok(DenseMatrix::from_fn(n, k, |r, c| {
        pairs.vectors.get(r, keep[c])
    }))
}

fn count_components(adj: &CsrMatrix) -> usize {
    let n = adj.n_rows();
    let mut seen = vec![false; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(u) = stack.pop() {
            for &v in adj.row_indices(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

/// `(1 − λ_C)·P^{C0} + λ_C·P^{C1}`, where `P^{C0}` comes from the joint graph
/// and `P^{C1}` stacks the user-side and item-side eigenvectors. Only the
/// terms with non-zero weight are computed.
pub fn spectral_encoding(
    graph: &BipartiteGraph,
    h_c: usize,
    lambda_c: f64,
    opts: &EigenOptions,
) -> Result<SpectralEncoding> {
    if h_c == 0 {
        return Err(Error::InvalidArgument(
            "spectral encoding width must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&lambda_c) {
        return Err(Error::InvalidArgument(format!(
            "lambda_c must lie in [0,1], got {lambda_c}"
        )));
    }
    let joint = (lambda_c < 1.0)
        .then(|| laplacian_eigenvectors(&graph.joint_adjacency(), h_c, "joint", opts))
        .transpose()?;
    let sided = if lambda_c > 0.0 {
        let mut parts = Vec::with_capacity(2);
        for side in [Side::User, Side::Item] {
            let adj = graph.one_sided_adjacency(side);
            if adj.nnz() == 0 {
                return Err(Error::EmptyProjection { side: side.name() });
            }
            let name = match side {
                Side::User => "user-side",
                Side::Item => "item-side",
            };
            parts.push(laplacian_eigenvectors(&adj, h_c, name, opts)?);
        }
        Some(DenseMatrix::vstack(&parts[0], &parts[1]))
    } else {
        None
    };
    let matrix = match (joint, sided) {
        (Some(j), None) => j,
        (None, Some(s)) => s,
        (Some(j), Some(s)) => j.zip_map(&s, |a, b| (1.0 - lambda_c) * a + lambda_c * b),
        (None, None) => unreachable!("lambda_c lies in [0,1]"),
    };
    Ok(SpectralEncoding { matrix })
}

/// Stable rank grouping: nodes sorted by `(value, index)` ascending are cut
/// into `n_groups` contiguous blocks whose sizes differ by at most one, the
/// first `len mod n_groups` blocks taking the extra node.
pub fn group_by_rank(values: &[f64], n_groups: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if n_groups == 0 || n_groups > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} nodes into {n_groups} groups"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let (base, extra) = (n / n_groups, n % n_groups);
    let mut group_of = vec![0; n];
    let mut pos = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g < extra);
        for &node in &order[pos..pos + size] {
            group_of[node] = g;
        }
        pos += size;
    }
    Ok(group_of)
}

fn assign(side: Side, values: &[f64], n_groups: usize) -> Result<GroupAssignment> {
    // a side with fewer nodes than groups leaves the upper table rows unused
    let effective = n_groups.min(values.len()).max(1);
    Ok(GroupAssignment {
        side,
        n_groups,
        group_of: if values.is_empty() {
            Vec::new()
        } else {
            group_by_rank(values, effective)?
        },
    })
}

/// Degree groups for users (by activity) and items (by popularity).
pub fn degree_groups(
    graph: &BipartiteGraph,
    n_d: usize,
) -> Result<(GroupAssignment, GroupAssignment)> {
    if n_d == 0 {
        return Err(Error::InvalidArgument(
            "degree group count must be positive".into(),
        ));
    }
    let as_f64 = |d: &[usize]| d.iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok((
        assign(Side::User, &as_f64(graph.user_degree()), n_d)?,
        assign(Side::Item, &as_f64(graph.item_degree()), n_d)?,
    ))
}

/// PageRank groups: scores come from one run on the joint graph, then each
/// side is ranked separately into `n_r` groups.
pub fn pagerank_groups(
    graph: &BipartiteGraph,
    n_r: usize,
    opts: &PageRankOptions,
) -> Result<(GroupAssignment, GroupAssignment)> {
    if n_r == 0 {
        return Err(Error::InvalidArgument(
            "pagerank group count must be positive".into(),
        ));
    }
    let scores = pagerank(&graph.joint_adjacency(), opts)?;
    let (users, items) = scores.split_at(graph.n_users());
    Ok((
        assign(Side::User, users, n_r)?,
        assign(Side::Item, items, n_r)?,
    ))
}

/// Learned encoding tables and projection matrices, registered in a
/// [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct EncodingParams {
    pub degree_user: Option<ParamId>,
    pub degree_item: Option<ParamId>,
    pub pagerank_user: Option<ParamId>,
    pub pagerank_item: Option<ParamId>,
    /// Row 0 items, row 1 users.
    pub node_type: Option<ParamId>,
    pub w_c: Option<ParamId>,
    pub w_d: Option<ParamId>,
    pub w_r: Option<ParamId>,
    pub w_y: Option<ParamId>,
    pub w_user: Option<ParamId>,
    pub w_item: Option<ParamId>,
}

impl EncodingParams {
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        [
            self.degree_user,
            self.degree_item,
            self.pagerank_user,
            self.pagerank_item,
            self.node_type,
            self.w_c,
            self.w_d,
            self.w_r,
            self.w_y,
            self.w_user,
            self.w_item,
        ]
        .into_iter()
        .flatten()
    }
}

/// Everything needed to produce `P_j` for every node.
#[derive(Clone, Debug)]
pub struct PositionalEncodingSet {
    pub config: EncodingConfig,
    pub dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub spectral: Option<Rc<DenseMatrix>>,
    pub degree_user: Option<GroupAssignment>,
    pub degree_item: Option<GroupAssignment>,
    pub pagerank_user: Option<GroupAssignment>,
    pub pagerank_item: Option<GroupAssignment>,
    pub params: EncodingParams,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

/// Group tables: `U(±0.1/√H)`.
fn table_init(rows: usize, width: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    uniform(rows, width, 0.1 / (width as f64).sqrt(), rng)
}

/// Projections: Glorot uniform.
fn projection_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl PositionalEncodingSet {
    /// Computes the fixed parts of every enabled encoding from the graph and
    /// registers the trainable parts in `store`.
    pub fn build(
        graph: &BipartiteGraph,
        config: &EncodingConfig,
        dim: usize,
        store: &mut ParamStore,
        seed: u64,
        eigen: &EigenOptions,
        pr: &PageRankOptions,
    ) -> Result<Self> {
        let flags = config.flags;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = EncodingParams {
            degree_user: None,
            degree_item: None,
            pagerank_user: None,
            pagerank_item: None,
            node_type: None,
            w_c: None,
            w_d: None,
            w_r: None,
            w_y: None,
            w_user: None,
            w_item: None,
        };
        let mut spectral = None;
        let (mut degree_user, mut degree_item, mut pagerank_user, mut pagerank_item) =
            (None, None, None, None);

        if flags.spectral {
            let enc = spectral_encoding(graph, config.h_c, config.lambda_c, eigen)?;
            spectral = Some(Rc::new(enc.matrix));
            params.w_c =
                Some(store.add("enc.w_c", projection_init(dim, config.h_c, &mut rng), true));
        }
        if flags.degree {
            let (u, i) = degree_groups(graph, config.n_d)?;
            degree_user = Some(u);
            degree_item = Some(i);
            params.degree_user = Some(store.add(
                "enc.degree_user",
                table_init(config.n_d, config.h_d, &mut rng),
                true,
            ));
            params.degree_item = Some(store.add(
                "enc.degree_item",
                table_init(config.n_d, config.h_d, &mut rng),
                true,
            ));
            params.w_d =
                Some(store.add("enc.w_d", projection_init(dim, config.h_d, &mut rng), true));
        }
        if flags.pagerank {
            let (u, i) = pagerank_groups(graph, config.n_r, pr)?;
            pagerank_user = Some(u);
            pagerank_item = Some(i);
            params.pagerank_user = Some(store.add(
                "enc.pagerank_user",
                table_init(config.n_r, config.h_r, &mut rng),
                true,
            ));
            params.pagerank_item = Some(store.add(
                "enc.pagerank_item",
                table_init(config.n_r, config.h_r, &mut rng),
                true,
            ));
            params.w_r =
                Some(store.add("enc.w_r", projection_init(dim, config.h_r, &mut rng), true));
        }
        if flags.node_type {
            params.node_type =
                Some(store.add("enc.type", table_init(2, config.h_y, &mut rng), true));
            params.w_y =
                Some(store.add("enc.w_y", projection_init(dim, config.h_y, &mut rng), true));
        }
        if flags.any() {
            params.w_user =
                Some(store.add("enc.w_user", projection_init(dim, dim, &mut rng), true));
            params.w_item =
                Some(store.add("enc.w_item", projection_init(dim, dim, &mut rng), true));
        }
        Ok(Self {
            config: *config,
            dim,
            n_users: graph.n_users(),
            n_items: graph.n_items(),
            spectral,
            degree_user,
            degree_item,
            pagerank_user,
            pagerank_item,
            params,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    /// Trainable scalars owned by the encodings.
    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.params.ids().map(|id| store.get(id).numel()).sum()
    }

    fn joint_groups(
        &self,
        users: &Option<GroupAssignment>,
        items: &Option<GroupAssignment>,
    ) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
        (
            Rc::new(users.as_ref().expect("enabled").group_of.clone()),
            Rc::new(items.as_ref().expect("enabled").group_of.clone()),
        )
    }

    /// `P` for all nodes as a `(N+M) x d` tape value, or `None` when every
    /// encoding is disabled (all positions are zero).
    pub fn positions(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let p = &self.params;
        let mut terms: Vec<Var> = Vec::new();

        if let (Some(spec), Some(w_c)) = (&self.spectral, p.w_c) {
            let enc = tape.constant((**spec).clone())?;
            let w = tape.param(w_c)?;
            terms.push(tape.matmul_nt(enc, w)?);
        }
        for (users, items, tu, ti, w) in [
            (
                &self.degree_user,
                &self.degree_item,
                p.degree_user,
                p.degree_item,
                p.w_d,
            ),
            (
                &self.pagerank_user,
                &self.pagerank_item,
                p.pagerank_user,
                p.pagerank_item,
                p.w_r,
            ),
        ] {
            if let (Some(tu), Some(ti), Some(w)) = (tu, ti, w) {
                let (gu, gi) = self.joint_groups(users, items);
                let tu = tape.param(tu)?;
                let ti = tape.param(ti)?;
                let rows_u = tape.gather_rows(tu, gu)?;
                let rows_i = tape.gather_rows(ti, gi)?;
                let enc = tape.concat_rows(rows_u, rows_i)?;
                let w = tape.param(w)?;
                terms.push(tape.matmul_nt(enc, w)?);
            }
        }
        if let (Some(ty), Some(w_y)) = (p.node_type, p.w_y) {
            let mut rows = vec![1usize; self.n_users];
            rows.extend(std::iter::repeat_n(0, self.n_items));
            let table = tape.param(ty)?;
            let enc = tape.gather_rows(table, Rc::new(rows))?;
            let w = tape.param(w_y)?;
            terms.push(tape.matmul_nt(enc, w)?);
        }

        let Some((&first, rest)) = terms.split_first() else {
            return Ok(None);
        };
        let mut summed = first;
        for &t in rest {
            summed = tape.add(summed, t)?;
        }
        let (w_user, w_item) = (
            p.w_user.expect("set when any encoding is on"),
            p.w_item.expect("set"),
        );
        let users = tape.slice_rows(summed, 0, self.n_users)?;
        let items = tape.slice_rows(summed, self.n_users, self.n_items)?;
        let wu = tape.param(w_user)?;
        let wi = tape.param(w_item)?;
        let pu = tape.matmul_nt(users, wu)?;
        let pi = tape.matmul_nt(items, wi)?;
        Ok(Some(tape.concat_rows(pu, pi)?))
    }

    /// `P_j` for a single node (users first, then items), evaluated directly
    /// from the current parameter values.
    pub fn node_position(&self, store: &ParamStore, node: usize) -> Vec<f64> {
        assert!(node < self.n_nodes(), "node {node} out of range");
        let p = &self.params;
        let d = self.dim;
        let is_user = node < self.n_users;
        let local = if is_user { node } else { node - self.n_users };
        let mut acc = vec![0.0; d];
        let mut add_term = |w: ParamId, enc: &[f64]| {
            let w = store.value(w);
            for (r, a) in acc.iter_mut().enumerate() {
                *a += crate::numerics::dense::dot(w.row(r), enc);
            }
        };
        if let (Some(spec), Some(w_c)) = (&self.spectral, p.w_c) {
            add_term(w_c, spec.row(node));
        }
        for (users, items, tu, ti, w) in [
            (
                &self.degree_user,
                &self.degree_item,
                p.degree_user,
                p.degree_item,
                p.w_d,
            ),
            (
                &self.pagerank_user,
                &self.pagerank_item,
                p.pagerank_user,
                p.pagerank_item,
                p.w_r,
            ),
        ] {
            if let (Some(tu), Some(ti), Some(w)) = (tu, ti, w) {
                let (assignment, table) = if is_user { (users, tu) } else { (items, ti) };
                let group = assignment.as_ref().expect("enabled").group_of[local];
                add_term(w, store.value(table).row(group));
            }
        }
        if let (Some(ty), Some(w_y)) = (p.node_type, p.w_y) {
            add_term(w_y, store.value(ty).row(usize::from(is_user)));
        }
        let Some(side_w) = (if is_user { p.w_user } else { p.w_item }) else {
            return vec![0.0; d];
        };
        let side_w = store.value(side_w);
        (0..d)
            .map(|r| crate::numerics::dense::dot(side_w.row(r), &acc))
            .collect()
    }
}

/// Closed-form count of the trainable scalars the encodings add on top of
/// the embedding table, honouring disabled encodings.
pub fn added_parameter_formula(config: &EncodingConfig, dim: usize) -> usize {
    let f = config.flags;
    let mut total = 0;
    if f.spectral {
        total += dim * config.h_c;
    }
    if f.degree {
        total += 2 * config.n_d * config.h_d + dim * config.h_d;
    }
    if f.pagerank {
        total += 2 * config.n_r * config.h_r + dim * config.h_r;
    }
    if f.node_type {
        total += 2 * config.h_y + dim * config.h_y;
    }
    if f.any() {
        total += 2 * dim * dim;
    }
    total
}
