//! Local neighbourhood propagation over the symmetric-normalized bipartite
//! adjacency, and the mean readout over layers.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::BipartiteGraph;
use crate::error::{Error, Result};
use crate::numerics::{CsrMatrix, SparseOperator, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    /// Normalized sum aggregation, no transform, no self loop.
    #[default]
    LightGcn,
    /// Aggregation followed by a per-layer linear map and a leaky ReLU.
    TransformGcn,
}

impl std::str::FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lightgcn" | "light-gcn" => Ok(Self::LightGcn),
            "transform-gcn" | "transformgcn" => Ok(Self::TransformGcn),
            other => Err(Error::InvalidArgument(format!(
                "unknown backbone `{other}`"
            ))),
        }
    }
}

/// `D^{-1/2} A D^{-1/2}` over all `N + M` nodes. Rows of isolated nodes are
/// empty, so they propagate to zero.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    operator: Rc<SparseOperator>,
    isolated: usize,
}

impl NormalizedAdjacency {
    pub fn new(graph: &BipartiteGraph) -> Self {
        let n = graph.n_users();
        let mut triplets = Vec::with_capacity(2 * graph.n_edges());
        for u in 0..n {
            let du = graph.user_degree()[u] as f64;
            for &i in graph.user_neighbors(u) {
                let w = 1.0 / (du * graph.item_degree()[i] as f64).sqrt();
                triplets.push((u, n + i, w));
                triplets.push((n + i, u, w));
            }
        }
        let isolated = graph
            .user_degree()
            .iter()
            .chain(graph.item_degree())
            .filter(|&&d| d == 0)
            .count();
        if isolated > 0 {
            log::debug!("{isolated} isolated nodes will propagate to zero");
        }
        let matrix = CsrMatrix::from_triplets(graph.n_nodes(), graph.n_nodes(), &triplets);
        Self {
            operator: Rc::new(SparseOperator::new(matrix)),
            isolated,
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        self.operator.matrix()
    }

    pub fn operator(&self) -> &Rc<SparseOperator> {
        &self.operator
    }

    pub fn isolated_nodes(&self) -> usize {
        self.isolated
    }
}

/// One propagation step. `weight` is the layer's `d x d` transform and is
/// required exactly for [`BackboneVariant::TransformGcn`].
pub fn propagate_layer(
    tape: &mut Tape,
    adj: &NormalizedAdjacency,
    variant: BackboneVariant,
    h: Var,
    weight: Option<Var>,
) -> Result<Var> {
    let aggregated = tape.spmm(adj.operator(), h)?;
    match (variant, weight) {
        (BackboneVariant::LightGcn, None) => Ok(aggregated),
        (BackboneVariant::TransformGcn, Some(w)) => {
            let mapped = tape.matmul(aggregated, w)?;
            tape.leaky_relu(mapped, LEAKY_SLOPE)
        }
        (BackboneVariant::LightGcn, Some(_)) => Err(Error::InvalidArgument(
            "lightgcn propagation takes no transform".into(),
        )),
        (BackboneVariant::TransformGcn, None) => Err(Error::InvalidArgument(
            "transform-gcn propagation needs a layer transform".into(),
        )),
    }
}

/// Arithmetic mean of the layer tables.
pub fn readout(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("readout over zero layers".into()))?;
    let mut acc = *first;
    for &l in rest {
        acc = tape.add(acc, l)?;
    }
    if layers.len() == 1 {
        return Ok(acc);
    }
    tape.scale(acc, 1.0 / layers.len() as f64)
}
