//! Encoder and decoder wired into one set-to-sequence model.

use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, DecoderWeights, InstanceLoss, LossConfig};
use crate::encoder::{self, Dropout, EncodedSet, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, ParameterStore, SeededRng};
use crate::permutation::Permutation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw feature width of each set element.
    pub d_input: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_input == 0 || self.decoder.d_att == 0 || self.decoder.pair_hidden == 0 {
            return Err(Error::Config("d_input, d_att and pair_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the full model; values live in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Set2Seq {
    pub cfg: ModelConfig,
    pub encoder: EncoderWeights,
    pub decoder: DecoderWeights,
}

impl Set2Seq {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new(store: &mut ParameterStore, cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderWeights::init(store, &cfg.encoder, cfg.d_input, rng)?;
        let decoder = DecoderWeights::init(store, &cfg.decoder, cfg.encoder.d_model, rng);
        Ok(Self { cfg, encoder, decoder })
    }

    fn check_input(&self, x: &Matrix, mask: &[bool]) -> Result<()> {
        if x.cols() != self.cfg.d_input {
            return Err(Error::Shape(format!("input has {} features, model expects {}", x.cols(), self.cfg.d_input)));
        }
        if mask.len() != x.rows() {
            return Err(Error::Shape(format!("mask length {} for {} rows", mask.len(), x.rows())));
        }
        Ok(())
    }

    /// Teacher-forced loss terms of one (possibly padded) instance.
    pub fn instance_graph(
        &self,
        g: &mut Graph<'_>,
        x: &Matrix,
        mask: &[bool],
        y: &Permutation,
        loss: &LossConfig,
        dropout: &mut Dropout<'_>,
    ) -> Result<(InstanceLoss, Vec<Vec<Option<f64>>>)> {
        self.check_input(x, mask)?;
        let xn = g.constant(x.clone());
        let enc = encoder::encode_set_graph(g, xn, &self.encoder, &self.cfg.encoder, mask, dropout)?;
        decoder::teacher_forced_graph(g, &self.decoder, enc, mask, y, loss, dropout)
    }

    pub fn encode(&self, store: &ParameterStore, x: &Matrix, mask: &[bool]) -> Result<EncodedSet> {
        self.check_input(x, mask)?;
        encoder::encode_set(store, &self.encoder, &self.cfg.encoder, x, mask)
    }

    /// `(nll, l_s)` without dropout.
    pub fn score(&self, store: &ParameterStore, x: &Matrix, mask: &[bool], y: &Permutation, loss: &LossConfig) -> Result<(f64, f64)> {
        let mut g = Graph::new(store);
        let (l, _) = self.instance_graph(&mut g, x, mask, y, loss, &mut Dropout::off())?;
        Ok((g.scalar(l.nll), g.scalar(l.l_s)))
    }

    /// Greedy ordering of the real rows of `x`.
    pub fn predict(&self, store: &ParameterStore, x: &Matrix, mask: &[bool]) -> Result<Permutation> {
        self.check_input(x, mask)?;
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let enc = encoder::encode_set_graph(&mut g, xn, &self.encoder, &self.cfg.encoder, mask, &mut Dropout::off())?;
        decoder::decode_greedy_graph(&mut g, &self.decoder, enc, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Sigma;
    use crate::numerics::{grad_check, GradCheckConfig};

    pub(crate) fn tiny(sigma: Sigma, augment: bool) -> ModelConfig {
        ModelConfig {
            d_input: 3,
            encoder: EncoderConfig {
                d_model: 4,
                n_heads: 2,
                n_sit_layers: 2,
                sigma,
                dropout: 0.0,
                augment_set: augment,
                ..Default::default()
            },
            decoder: DecoderConfig {
                d_att: 5,
                pair_hidden: 3,
                zero_init_pointer: false,
            },
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn check(cfg: ModelConfig, seed: u64) {
        let mut store = ParameterStore::new();
        let mut rng = SeededRng::new(seed);
        let model = Set2Seq::new(&mut store, cfg, &mut rng).unwrap();
        let x = random(4, 3, &mut rng).scale(3.0);
        let y = Permutation::new(vec![2, 0, 3, 1]).unwrap();
        let loss = LossConfig { lambda: 0.5, pair_cap: 0, paper_sign: false };
        let report = grad_check(
            &mut store,
            |g| {
                let (l, _) = model.instance_graph(g, &x, &[true; 4], &y, &loss, &mut Dropout::off())?;
                decoder::instance_loss(g, &l, &loss)
            },
            &GradCheckConfig { coords_per_param: 6, seed, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "max rel error {} in {:?}", report.max_rel_error(), report.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)));
    }

    #[test]
    fn end_to_end_gradients_softmax() {
        check(tiny(Sigma::Softmax, true), 1);
    }

    #[test]
    fn end_to_end_gradients_tanh_and_ablation() {
        check(tiny(Sigma::Tanh, true), 2);
        check(tiny(Sigma::Softmax, false), 3);
    }

    #[test]
    fn padding_does_not_change_scores() {
        let mut store = ParameterStore::new();
        let mut rng = SeededRng::new(5);
        let model = Set2Seq::new(&mut store, tiny(Sigma::Softmax, true), &mut rng).unwrap();
        let x = random(3, 3, &mut rng);
        let padded = Matrix::concat_rows(&[&x, &random(2, 3, &mut rng)]).unwrap();
        let y = Permutation::new(vec![1, 2, 0]).unwrap();
        let loss = LossConfig { pair_cap: 0, ..Default::default() };
        let (a, la) = model.score(&store, &x, &[true; 3], &y, &loss).unwrap();
        let (b, lb) = model.score(&store, &padded, &[true, true, true, false, false], &y, &loss).unwrap();
        assert!((a - b).abs() < 1e-10 && (la - lb).abs() < 1e-10);
        assert_eq!(
            model.predict(&store, &x, &[true; 3]).unwrap(),
            model.predict(&store, &padded, &[true, true, true, false, false]).unwrap()
        );
    }

    #[test]
    fn symmetric_init_starts_at_log_factorial() {
        let mut cfg = tiny(Sigma::Softmax, true);
        cfg.decoder.zero_init_pointer = true;
        let mut store = ParameterStore::new();
        let mut rng = SeededRng::new(6);
        let model = Set2Seq::new(&mut store, cfg, &mut rng).unwrap();
        for n in [4usize, 6, 8] {
            let x = random(n, 3, &mut rng);
            let y = Permutation::new(rng.permutation(n)).unwrap();
            let (nll, _) = model.score(&store, &x, &vec![true; n], &y, &LossConfig::default()).unwrap();
            let log_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
            assert!((nll - log_fact).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let mut store = ParameterStore::new();
        let model = Set2Seq::new(&mut store, tiny(Sigma::Softmax, true), &mut SeededRng::new(0)).unwrap();
        assert!(model.predict(&store, &Matrix::zeros(3, 2), &[true; 3]).is_err());
    }
}
