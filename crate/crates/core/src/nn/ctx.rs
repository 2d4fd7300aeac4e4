use crate::autodiff::{BatchStats, Graph, Var};
use crate::nn::params::ParamId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are reported, not
    /// applied.
    Train,
    /// Running statistics only; a pure function of the parameters.
    Infer,
}

/// Running-statistics update observed by one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Forward-pass context: the graph, the model's parameters bound on it, and
/// the batch-norm updates collected along the way.
pub struct Ctx<'g> {
    pub graph: &'g mut Graph,
    vars: Vec<Var>,
    pub mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g mut Graph, vars: Vec<Var>, mode: Mode) -> Self {
        Ctx {
            graph,
            vars,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}
