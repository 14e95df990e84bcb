use rand::Rng;

use crate::graph::{Graph, Var};
use crate::layer::config::LayerConfig;
use crate::tensor::Tensor;

/// Per-channel affine of a normalization block.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn new(channels: usize) -> Self {
        NormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> NormVars {
        NormVars {
            gamma: g.leaf(self.gamma.clone(), requires_grad),
            beta: g.leaf(self.beta.clone(), requires_grad),
        }
    }
}

/// Fan-in scaled uniform init for a `Cout x Cin x 3 x 3` kernel.
pub fn init_kernel<R: Rng + ?Sized>(c_out: usize, c_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain / ((c_in * 9) as f64).sqrt();
    Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng)
}

/// Learnable tensors of one layer. Kernels are stored `Cout x Cin x 3 x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// input transform `x -> h`
    pub theta_x: Tensor,
    /// query embedding
    pub theta_omega: Tensor,
    /// key embedding, reads `2C` channels
    pub theta_phi: Tensor,
    /// value embedding, reads `2C` channels
    pub theta_psi: Tensor,
    /// transform applied to the attention output
    pub theta_v: Tensor,
    /// output transform, reads `[x, h, a]`
    pub theta_y: Tensor,
    /// query spatial filter, `1 x 2 x 3 x 3`
    pub theta_q: Tensor,
    /// key spatial filter, `1 x 2 x 3 x 3`
    pub theta_k: Tensor,
    pub norm_x: NormParams,
    pub norm_omega: NormParams,
    pub norm_phi: NormParams,
    pub norm_psi: NormParams,
    pub norm_v: NormParams,
    pub norm_y: NormParams,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub theta_x: Var,
    pub theta_omega: Var,
    pub theta_phi: Var,
    pub theta_psi: Var,
    pub theta_v: Var,
    pub theta_y: Var,
    pub theta_q: Var,
    pub theta_k: Var,
    pub norm_x: NormVars,
    pub norm_omega: NormVars,
    pub norm_phi: NormVars,
    pub norm_psi: NormVars,
    pub norm_v: NormVars,
    pub norm_y: NormVars,
}

/// Kernel names in checkpoint order.
pub const KERNEL_NAMES: [&str; 8] = [
    "theta_x",
    "theta_omega",
    "theta_phi",
    "theta_psi",
    "theta_v",
    "theta_y",
    "theta_q",
    "theta_k",
];

const NORM_NAMES: [&str; 6] = [
    "norm_x",
    "norm_omega",
    "norm_phi",
    "norm_psi",
    "norm_v",
    "norm_y",
];

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(config: &LayerConfig, rng: &mut R) -> Self {
        let c = config.channels_in;
        let co = config.channels_out;
        LayerParams {
            theta_x: init_kernel(c, c, 1.0, rng),
            theta_omega: init_kernel(c, c, 1.0, rng),
            theta_phi: init_kernel(c, 2 * c, 1.0, rng),
            theta_psi: init_kernel(c, 2 * c, 1.0, rng),
            theta_v: init_kernel(c, c, 1.0, rng),
            theta_y: init_kernel(co, 3 * c, 1.0, rng),
            theta_q: init_kernel(1, 2, 0.1, rng),
            theta_k: init_kernel(1, 2, 0.1, rng),
            norm_x: NormParams::new(c),
            norm_omega: NormParams::new(c),
            norm_phi: NormParams::new(c),
            norm_psi: NormParams::new(c),
            norm_v: NormParams::new(c),
            norm_y: NormParams::new(co),
        }
    }

    pub fn kernels(&self) -> [&Tensor; 8] {
        [
            &self.theta_x,
            &self.theta_omega,
            &self.theta_phi,
            &self.theta_psi,
            &self.theta_v,
            &self.theta_y,
            &self.theta_q,
            &self.theta_k,
        ]
    }

    fn norms(&self) -> [&NormParams; 6] {
        [
            &self.norm_x,
            &self.norm_omega,
            &self.norm_phi,
            &self.norm_psi,
            &self.norm_v,
            &self.norm_y,
        ]
    }

    /// Number of kernel weights (normalization affines excluded).
    pub fn kernel_param_count(&self) -> usize {
        self.kernels().iter().map(|k| k.len()).sum()
    }

    /// All tensors with their names, kernels first, then `norm_*.gamma/beta`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = KERNEL_NAMES
            .iter()
            .zip(self.kernels())
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (n, p) in NORM_NAMES.iter().zip(self.norms()) {
            out.push((format!("{n}.gamma"), &p.gamma));
            out.push((format!("{n}.beta"), &p.beta));
        }
        out
    }

    /// Same order as [`LayerParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.theta_x,
            &mut self.theta_omega,
            &mut self.theta_phi,
            &mut self.theta_psi,
            &mut self.theta_v,
            &mut self.theta_y,
            &mut self.theta_q,
            &mut self.theta_k,
        ];
        for p in [
            &mut self.norm_x,
            &mut self.norm_omega,
            &mut self.norm_phi,
            &mut self.norm_psi,
            &mut self.norm_v,
            &mut self.norm_y,
        ] {
            out.push(&mut p.gamma);
            out.push(&mut p.beta);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> LayerVars {
        let mut k = |t: &Tensor| g.leaf(t.clone(), requires_grad);
        let theta_x = k(&self.theta_x);
        let theta_omega = k(&self.theta_omega);
        let theta_phi = k(&self.theta_phi);
        let theta_psi = k(&self.theta_psi);
        let theta_v = k(&self.theta_v);
        let theta_y = k(&self.theta_y);
        let theta_q = k(&self.theta_q);
        let theta_k = k(&self.theta_k);
        LayerVars {
            theta_x,
            theta_omega,
            theta_phi,
            theta_psi,
            theta_v,
            theta_y,
            theta_q,
            theta_k,
            norm_x: self.norm_x.bind(g, requires_grad),
            norm_omega: self.norm_omega.bind(g, requires_grad),
            norm_phi: self.norm_phi.bind(g, requires_grad),
            norm_psi: self.norm_psi.bind(g, requires_grad),
            norm_v: self.norm_v.bind(g, requires_grad),
            norm_y: self.norm_y.bind(g, requires_grad),
        }
    }
}

impl LayerVars {
    /// Same order as [`LayerParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.theta_x,
            self.theta_omega,
            self.theta_phi,
            self.theta_psi,
            self.theta_v,
            self.theta_y,
            self.theta_q,
            self.theta_k,
        ];
        for n in [
            self.norm_x,
            self.norm_omega,
            self.norm_phi,
            self.norm_psi,
            self.norm_v,
            self.norm_y,
        ] {
            out.push(n.gamma);
            out.push(n.beta);
        }
        out
    }
}
