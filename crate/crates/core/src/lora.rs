//! Low-rank adapters over named base matrices.
//!
//! For a target `W[out × in]` the adapter holds `A[r × in]` and `B[out × r]`,
//! and the adapted layer computes `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ`. `B` starts at zero
//! so a fresh adapter leaves the model unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dit::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Graph, Rng, Scalar, Tensor, Var};

pub const DEFAULT_RANK: usize = 16;
const A_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraConfig {
    /// Every attention and MLP projection, with `α = r`.
    pub fn all_projections(model: &ModelConfig, rank: usize) -> Self {
        Self {
            rank,
            alpha: rank as f64,
            targets: model.projection_names(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Invalid("LoRA rank must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Invalid("LoRA needs at least one target".into()));
        }
        for name in &self.targets {
            let w = params.get(name)?;
            let (o, i) = w.dims2("lora target").map_err(|_| Error::UnknownTarget(name.clone()))?;
            if self.rank > o.min(i) {
                return Err(Error::Invalid(format!(
                    "rank {} exceeds min dimension of {name} ({o}x{i})",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `[r × in]`
    pub a: Tensor<f32>,
    /// `[out × r]`
    pub b: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub factors: BTreeMap<String, LoraFactors>,
}

impl LoraAdapter {
    /// Checks config, targets and factor shapes against `params`.
    pub fn check_against(&self, params: &ModelParams) -> Result<()> {
        self.config.validate(params)?;
        if self.factors.len() != self.config.targets.len() {
            return Err(Error::Invalid("adapter factors do not match its target list".into()));
        }
        let r = self.config.rank;
        for name in &self.config.targets {
            let f = self
                .factors
                .get(name)
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            let (o, i) = params.get(name)?.dims2("lora")?;
            if f.a.shape() != [r, i] || f.b.shape() != [o, r] {
                return Err(Error::shape(
                    "lora",
                    format!(
                        "{name}: A {:?}, B {:?} for W {o}x{i}, rank {r}",
                        f.a.shape(),
                        f.b.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.factors.len()
    }

    /// `(α/r)·B·A` for one target.
    pub fn delta(&self, name: &str) -> Result<Tensor<f32>> {
        let f = self
            .factors
            .get(name)
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))?;
        let (o, r) = f.b.dims2("lora delta")?;
        let i = f.a.last_dim();
        let mut out = vec![0.0f32; o * i];
        gemm(false, false, o, r, i, f.b.data(), f.a.data(), &mut out, false);
        let s = self.config.scale() as f32;
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::new(vec![o, i], out)
    }
}

/// `A ~ N(0, 0.02²)`, `B = 0` for every target.
pub fn init_adapter(config: &LoraConfig, params: &ModelParams, rng: &mut Rng) -> Result<LoraAdapter> {
    config.validate(params)?;
    let mut factors = BTreeMap::new();
    for name in &config.targets {
        let (o, i) = params.get(name)?.dims2("lora")?;
        let a = (0..config.rank * i).map(|_| (rng.normal() * A_STD) as f32).collect();
        factors.insert(
            name.clone(),
            LoraFactors {
                a: Tensor::new(vec![config.rank, i], a)?,
                b: Tensor::zeros(vec![o, config.rank]),
            },
        );
    }
    Ok(LoraAdapter {
        config: config.clone(),
        factors,
    })
}

/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` on the tape. Whether `W`, `A`, `B` receive
/// gradients is decided by how they were placed on the graph.
pub fn adapted_matmul<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w: Var,
    a: Var,
    b: Var,
    alpha: f64,
    rank: usize,
) -> Result<Var> {
    let base = g.matmul_nt(x, w)?;
    let xa = g.matmul_nt(x, a)?;
    let low = g.matmul_nt(xa, b)?;
    let low = g.scale(low, alpha / rank as f64)?;
    g.add(base, low)
}

/// Folds the adapter into the base weights: `W ← W + (α/r)·B·A`.
///
/// Merging is not idempotent: a second merge of the same adapter adds the
/// delta again. The returned params carry `merged = true` and merging into
/// params with that flag set is refused.
pub fn merge(params: &ModelParams, adapter: &LoraAdapter) -> Result<ModelParams> {
    if params.merged {
        return Err(Error::Invalid("params already have an adapter merged in".into()));
    }
    adapter.check_against(params)?;
    let mut out = params.clone();
    for name in &adapter.config.targets {
        let delta = adapter.delta(name)?;
        let w = out
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
        w.data_mut().iter_mut().zip(delta.data()).for_each(|(v, d)| *v += d);
    }
    out.merged = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{forward, init_params};
    use crate::prompt::null_prompt;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            heads: 4,
            blocks: 2,
            max_height: 16,
            max_width: 16,
            ..ModelConfig::default()
        }
    }

    fn trained_like(ad: &mut LoraAdapter, rng: &mut Rng) {
        for f in ad.factors.values_mut() {
            f.b.data_mut()
                .iter_mut()
                .for_each(|v| *v = (rng.normal() * 0.05) as f32);
        }
    }

    #[test]
    fn hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[2.0, 5.0]]));
        let w = g.constant(Tensor::zeros(vec![2, 2]));
        let a = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let b = g.constant(Tensor::from_rows(&[&[1.0], &[0.0]]));
        let y = adapted_matmul(&mut g, x, w, a, b, 1.0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0]);
        // B = 0 gives the plain product
        let w2 = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = g.constant(Tensor::zeros(vec![2, 1]));
        let y = adapted_matmul(&mut g, x, w2, a, z, 16.0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[12.0, 26.0]);
    }

    #[test]
    fn gradients_reach_factors_only() {
        let mut rng = Rng::new(3);
        let xs: Tensor<f64> = rng.normal_tensor(vec![5, 6]);
        let ws: Tensor<f64> = rng.normal_tensor(vec![4, 6]);
        let a0: Tensor<f64> = rng.normal_tensor(vec![2, 6]);
        let b0: Tensor<f64> = rng.normal_tensor(vec![4, 2]);
        let target: Tensor<f64> = rng.normal_tensor(vec![5, 4]);
        let loss_of = |a: &Tensor<f64>, b: &Tensor<f64>, grads: bool| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(xs.clone());
            let w = g.constant(ws.clone());
            let av = g.leaf(a.clone(), grads);
            let bv = g.leaf(b.clone(), grads);
            let y = adapted_matmul(&mut g, x, w, av, bv, 3.0, 2).unwrap();
            let t = g.constant(target.clone());
            let l = g.mse(y, t).unwrap();
            if grads {
                g.backward(l).unwrap();
                assert!(g.grad(w).is_none());
                (g.scalar(l), g.grad(av), g.grad(bv))
            } else {
                (g.scalar(l), None, None)
            }
        };
        let (_, ga, gb) = loss_of(&a0, &b0, true);
        let (ga, gb) = (ga.unwrap(), gb.unwrap());
        let h = 1e-6;
        for (which, base, analytic) in [(0, &a0, &ga), (1, &b0, &gb)] {
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..base.numel() {
                let mut p = base.clone();
                let mut m = base.clone();
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                let (lp, lm) = if which == 0 {
                    (loss_of(&p, &b0, false).0, loss_of(&m, &b0, false).0)
                } else {
                    (loss_of(&a0, &p, false).0, loss_of(&a0, &m, false).0)
                };
                let num = (lp - lm) / (2.0 * h);
                worst = worst.max((num - analytic.data()[i]).abs());
                scale = scale.max(num.abs());
            }
            assert!(worst / scale < 1e-4, "factor {which}: {worst} vs {scale}");
        }
    }

    #[test]
    fn fresh_adapter_is_exact_noop() {
        let cfg = small();
        let params = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let lc = LoraConfig::all_projections(&cfg, 4);
        let ad = init_adapter(&lc, &params, &mut Rng::new(2)).unwrap();
        assert_eq!(ad.tensor_count(), 2 * cfg.blocks * 6);
        assert_eq!(ad, init_adapter(&lc, &params, &mut Rng::new(2)).unwrap());
        let mut rng = Rng::new(3);
        let z = rng.normal_tensor(vec![3, 8, 16]);
        let text = null_prompt();
        assert_eq!(
            forward(&params, Some(&ad), &z, 0.5, &text).unwrap(),
            forward(&params, None, &z, 0.5, &text).unwrap()
        );
        assert_eq!(merge(&params, &ad).unwrap().tensors, params.tensors);
    }

    #[test]
    fn config_errors() {
        let cfg = small();
        let params = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let mut lc = LoraConfig::all_projections(&cfg, 40);
        assert!(init_adapter(&lc, &params, &mut Rng::new(0)).is_err());
        lc.rank = 0;
        assert!(init_adapter(&lc, &params, &mut Rng::new(0)).is_err());
        let lc = LoraConfig {
            rank: 2,
            alpha: 2.0,
            targets: vec!["blocks.9.attn.wq".into()],
        };
        assert!(matches!(
            init_adapter(&lc, &params, &mut Rng::new(0)),
            Err(Error::UnknownTarget(_))
        ));
    }

    #[test]
    fn merge_matches_adapted_forward_and_is_guarded() {
        let cfg = small();
        let mut rng = Rng::new(7);
        let params = init_params(&cfg, &mut rng).unwrap();
        let lc = LoraConfig::all_projections(&cfg, 4);
        let mut ad = init_adapter(&lc, &params, &mut rng).unwrap();
        trained_like(&mut ad, &mut rng);
        let merged = merge(&params, &ad).unwrap();
        assert!(merged.merged);
        for _ in 0..3 {
            let z = rng.normal_tensor(vec![3, 16, 16]);
            let t = rng.uniform();
            let a = forward(&params, Some(&ad), &z, t, &null_prompt()).unwrap();
            let b = forward(&merged, None, &z, t, &null_prompt()).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
        }
        assert!(merge(&merged, &ad).is_err());
        let mut unguarded = merged.clone();
        unguarded.merged = false;
        let twice = merge(&unguarded, &ad).unwrap();
        assert_ne!(twice.tensors, merged.tensors);
    }

    #[test]
    fn delta_rank_is_bounded() {
        let cfg = small();
        let mut rng = Rng::new(9);
        let params = init_params(&cfg, &mut rng).unwrap();
        let r = 3;
        let mut ad = init_adapter(&LoraConfig::all_projections(&cfg, r), &params, &mut rng).unwrap();
        trained_like(&mut ad, &mut rng);
        for name in &ad.config.targets {
            let d = ad.delta(name).unwrap();
            let (o, i) = (d.shape()[0], d.shape()[1]);
            let m = nalgebra::DMatrix::from_row_slice(o, i, &d.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
            let sv = m.singular_values();
            let top = sv.max();
            let rank = sv.iter().filter(|&&s| s > 1e-6 * top).count();
            assert!(rank <= r, "{name}: numerical rank {rank}");
            assert!(rank > 0);
        }
    }
}
