use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{LayerNormParams, LayerParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::Result;

use super::ModelConfig;

/// A stack of (weight, bias) linear layers with ReLU between them (none
/// after the last).
#[derive(Clone, Debug)]
pub struct MlpParams<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn init<R: Rng>(in_dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for &w in widths {
            let limit = (6.0 / prev as f64).sqrt();
            let data = (0..prev * w)
                .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                .collect();
            layers.push((
                Tensor::new(vec![prev, w], data).expect("finite init"),
                Tensor::zeros(vec![w]),
            ));
            prev = w;
        }
        MlpParams { layers }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.w"), w);
            f(format!("{prefix}.{i}.b"), b);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.w"), w);
            f(format!("{prefix}.{i}.b"), b);
        }
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (tape.leaf(w, trainable), tape.leaf(b, trainable)))
                .collect(),
        }
    }

    /// Forward on the tape: linear layers with ReLU between them.
    pub fn forward(tape: &mut Tape<T>, x: Var, vars: &MlpVars) -> Result<Var> {
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row_bias(h, b)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams<T> {
    /// Unshared per-layer point embedder feeding this layer's keys/values.
    pub embedder: MlpParams<T>,
    pub cross: LayerParams<T>,
    pub selfa: LayerParams<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams<T> {
    pub cross: LayerParams<T>,
    pub selfa: LayerParams<T>,
}

/// Every learnable tensor of the model. Initialization is deterministic
/// from `init_seed` (He-style fan-in uniform for linear layers, N(0, 0.02)
/// for the probes and positional encodings), and the seed is recorded in
/// checkpoints.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub init_seed: u64,
    pub latent_probes: Tensor<T>,
    pub pos_enc_probes: Tensor<T>,
    pub pos_enc_latents: Tensor<T>,
    pub encoder: Vec<EncoderLayerParams<T>>,
    /// Closing norm of the encoder's pre-norm stack.
    pub encoder_out_norm: Option<LayerNormParams<T>>,
    pub decoder_embedder: MlpParams<T>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    /// Closing norm of the decoder stream before the coordinate MLP.
    pub decoder_out_norm: Option<LayerNormParams<T>>,
    pub final_mlp: MlpParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.latent_dim;
        let k = cfg.num_probes;
        let gauss = Normal::new(0.0, 0.02).expect("valid sigma");
        let gaussian = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols)
                .map(|_| T::from_f64(gauss.sample(rng)))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("finite init")
        };

        let latent_probes = gaussian(k, d, &mut rng);
        let pos_enc_probes = gaussian(k, d, &mut rng);
        let pos_enc_latents = gaussian(k, d, &mut rng);

        let encoder = (0..cfg.encoder_layers)
            .map(|_| EncoderLayerParams {
                embedder: MlpParams::init(3, &cfg.embedder_widths, &mut rng),
                cross: LayerParams::init(d, cfg.ff_hidden, true, cfg.layer_norm, &mut rng),
                selfa: LayerParams::init(d, cfg.ff_hidden, false, cfg.layer_norm, &mut rng),
            })
            .collect();

        let encoder_out_norm = cfg.layer_norm.then(|| LayerNormParams::init(d));
        let decoder_embedder = MlpParams::init(3, &cfg.embedder_widths, &mut rng);
        let decoder = (0..cfg.decoder_layers)
            .map(|_| DecoderLayerParams {
                cross: LayerParams::init(d, cfg.ff_hidden, true, cfg.layer_norm, &mut rng),
                selfa: LayerParams::init(d, cfg.ff_hidden, false, cfg.layer_norm, &mut rng),
            })
            .collect();

        let decoder_out_norm = cfg.layer_norm.then(|| LayerNormParams::init(d));
        let mut final_mlp = MlpParams::init(d, &cfg.final_mlp_widths, &mut rng);
        // a near-zero output head starts the decoder at the centroid with
        // live gradients instead of a large random offset
        if let Some((w, _)) = final_mlp.layers.last_mut() {
            let scaled: Vec<T> = w.data().iter().map(|&v| v * T::from_f64(0.02)).collect();
            *w = Tensor::new(w.shape().to_vec(), scaled).expect("finite init");
        }

        Ok(ModelParams {
            init_seed: seed,
            latent_probes,
            pos_enc_probes,
            pos_enc_latents,
            encoder,
            encoder_out_norm,
            decoder_embedder,
            decoder,
            decoder_out_norm,
            final_mlp,
        })
    }

    /// Visits every tensor in a fixed traversal order; the order defines
    /// the checkpoint layout and the optimizer slot assignment.
    pub fn for_each(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f("lp".into(), &self.latent_probes);
        f("pos_lp".into(), &self.pos_enc_probes);
        f("pos_ls".into(), &self.pos_enc_latents);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.embedder.for_each(&format!("enc.{i}.embed"), f);
            layer.cross.for_each(&format!("enc.{i}.cross"), f);
            layer.selfa.for_each(&format!("enc.{i}.self"), f);
        }
        if let Some(ln) = &self.encoder_out_norm {
            ln.for_each("enc.out_norm", f);
        }
        self.decoder_embedder.for_each("dec.embed", f);
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.cross.for_each(&format!("dec.{i}.cross"), f);
            layer.selfa.for_each(&format!("dec.{i}.self"), f);
        }
        if let Some(ln) = &self.decoder_out_norm {
            ln.for_each("dec.out_norm", f);
        }
        self.final_mlp.for_each("final", f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("lp".into(), &mut self.latent_probes);
        f("pos_lp".into(), &mut self.pos_enc_probes);
        f("pos_ls".into(), &mut self.pos_enc_latents);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            layer.embedder.for_each_mut(&format!("enc.{i}.embed"), f);
            layer.cross.for_each_mut(&format!("enc.{i}.cross"), f);
            layer.selfa.for_each_mut(&format!("enc.{i}.self"), f);
        }
        if let Some(ln) = &mut self.encoder_out_norm {
            ln.for_each_mut("enc.out_norm", f);
        }
        self.decoder_embedder.for_each_mut("dec.embed", f);
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            layer.cross.for_each_mut(&format!("dec.{i}.cross"), f);
            layer.selfa.for_each_mut(&format!("dec.{i}.self"), f);
        }
        if let Some(ln) = &mut self.decoder_out_norm {
            ln.for_each_mut("dec.out_norm", f);
        }
        self.final_mlp.for_each_mut("final", f);
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0usize;
        self.for_each(&mut |_, t| count += t.numel());
        count
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(&mut |name, _| names.push(name));
        names
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| {
            if t.data().iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }
}
