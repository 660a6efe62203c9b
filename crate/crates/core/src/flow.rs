use crate::points::Points;

/// Reference flow: one workspace vector per trajectory time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub vectors: Points,
    pub diagnostics: FlowDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowDiagnostics {
    /// RBF bandwidth used by the Stein flow.
    pub bandwidth: Option<f64>,
    /// Set when all points coincided and the bandwidth hit its floor.
    pub bandwidth_clamped: bool,
    /// Sinkhorn convergence of the transport problems behind the flow.
    pub transport_converged: Option<bool>,
    pub marginal_violation: Option<f64>,
}

impl FlowField {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Mean Euclidean length of the flow vectors.
    pub fn mean_magnitude(&self) -> f64 {
        self.vectors.mean_norm()
    }
}
