//! Minibatch training of the world model, metrics, and checkpoints.

use std::io::Write;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Mlp, Tape, Var};
use crate::bytes::Reader;
use crate::codebook::{ActionId, Codebook, CodebookTable};
use crate::cogmap::predict;
use crate::error::{GcqError, Result};
use crate::gridworld::Dataset;
use crate::model::{frames_matrix, mse, psnr, ModelConfig, WorldModel};
use crate::quantizer::{add_codebook_term, gcq_loss_graph, learnable_quantized_graph, quantize};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learnable: bool,
    /// Initialization length used for prediction metrics.
    pub init_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta: 0.25,
            gamma: 1.0,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            learnable: false,
            init_len: 3,
        }
    }
}

/// Prediction horizons reported per epoch.
pub const HORIZONS: [usize; 3] = [1, 10, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean reconstruction error over the epoch's minibatches.
    pub recon_mse: f64,
    pub commit_loss: f64,
    pub psnr_reconstruction: f64,
    /// `NaN` when no evaluation sequence is long enough.
    pub psnr_prediction: [f64; 3],
    /// Distinct base tuples chosen during the epoch.
    pub codes_used: usize,
    /// Per-factor count of chosen bases.
    pub usage: Vec<Vec<usize>>,
    pub codebook_term: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,recon_mse,commit_loss,psnr_reconstruction,psnr_prediction@1,psnr_prediction@10,psnr_prediction@50,codes_used";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let f = |x: f64| {
            if x.is_finite() {
                format!("{x:.6}")
            } else {
                "nan".to_string()
            }
        };
        format!(
            "{},{:.9},{:.9},{},{},{},{},{}",
            self.epoch,
            self.recon_mse,
            self.commit_loss,
            f(self.psnr_reconstruction),
            f(self.psnr_prediction[0]),
            f(self.psnr_prediction[1]),
            f(self.psnr_prediction[2]),
            self.codes_used
        )
    }
}

/// Frames and mapped actions of a dataset, ready for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub frames: Vec<Array2<f64>>,
    pub actions: Vec<Vec<ActionId>>,
}

impl Prepared {
    pub fn new(model: &WorldModel, data: &Dataset) -> Result<Self> {
        let frames = data
            .records
            .iter()
            .map(|r| frames_matrix(&r.frames))
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = frames.first() {
            if f.ncols() != model.observation_dim() {
                return Err(GcqError::DimensionMismatch {
                    context: "dataset frame size",
                    expected: model.observation_dim(),
                    found: f.ncols(),
                });
            }
        }
        let actions = data
            .records
            .iter()
            .map(|r| model.action_ids(&r.actions))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { frames, actions })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub epoch: usize,
    pub adam: Adam,
    /// Codeword table of a learnable codebook.
    pub codebook: Option<CodebookTable>,
}

pub const TRAINER_MAGIC: &[u8; 4] = b"GCQT";

impl Checkpoint {
    /// Encoder `GCQN` block, decoder `GCQN` block, then a `GCQT` block: u32 epoch, u64
    /// optimizer step, f64 lr/beta1/beta2/epsilon, u32 buffer count and per buffer u32
    /// rows, u32 cols, first and second moments; finally a u8 flag and, if set, a u32
    /// length and the `GCQ1` codebook table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.encoder.to_bytes();
        out.extend(self.decoder.to_bytes());
        out.extend_from_slice(TRAINER_MAGIC);
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.adam.first.len() as u32).to_le_bytes());
        for (m, v) in self.adam.first.iter().zip(&self.adam.second) {
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for x in m.iter().chain(v.iter()) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.codebook {
            None => out.push(0),
            Some(t) => {
                out.push(1);
                let bytes = t.to_bytes();
                out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                out.extend(bytes);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        let encoder = Mlp::read(&mut r)?;
        let decoder = Mlp::read(&mut r)?;
        r.magic(TRAINER_MAGIC)?;
        let epoch = r.u32()? as usize;
        let step = r.u64()?;
        let (lr, beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let buffers = r.u32()? as usize;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..buffers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| GcqError::decode("checkpoint", "buffer size overflow"))?;
            first.push(Array2::from_shape_vec((rows, cols), r.f64s(len)?).unwrap());
            second.push(Array2::from_shape_vec((rows, cols), r.f64s(len)?).unwrap());
        }
        let codebook = match r.u8()? {
            0 => None,
            1 => {
                let len = r.u32()? as usize;
                Some(CodebookTable::from_bytes(r.take(len)?)?)
            }
            other => return Err(GcqError::decode("checkpoint", format!("bad codebook flag {other}"))),
        };
        r.finish()?;
        let expected: Vec<(usize, usize)> = encoder
            .params()
            .iter()
            .chain(decoder.params().iter())
            .map(|p| p.dim())
            .collect();
        let found: Vec<(usize, usize)> = first.iter().map(|m| m.dim()).collect();
        if found.len() < expected.len() || found[..expected.len()] != expected[..] {
            return Err(GcqError::decode(
                "checkpoint",
                "optimizer buffers do not match the networks",
            ));
        }
        Ok(Checkpoint {
            encoder,
            decoder,
            epoch,
            adam: Adam {
                lr,
                beta1,
                beta2,
                epsilon,
                step,
                first,
                second,
            },
            codebook,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }
}

pub struct Trainer {
    pub model: WorldModel,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(
        codebook: Codebook,
        observation_dim: usize,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        let codebook = if config.learnable {
            codebook.into_learnable()?
        } else {
            codebook
        };
        let model = WorldModel::new(codebook, observation_dim, model_config, config.seed)?;
        let adam = Adam::new(config.lr, &parameter_shapes(&model));
        Ok(Trainer {
            model,
            config,
            adam,
            epoch: 0,
        })
    }

    pub fn resume(
        checkpoint: Checkpoint,
        codebook: Codebook,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        let params: Vec<_> = codebook.factors().iter().map(|f| f.params.clone()).collect();
        let codebook = match (&checkpoint.codebook, config.learnable) {
            (Some(table), true) => Codebook::learnable_from_table(&params, codebook.action_map().clone(), table)?,
            (None, false) => codebook,
            _ => {
                return Err(GcqError::LearnableFlagMismatch {
                    expected: config.learnable,
                })
            }
        };
        let model = WorldModel::from_parts(checkpoint.encoder, checkpoint.decoder, codebook, model_config)?;
        if checkpoint.adam.first.iter().map(|m| m.dim()).collect::<Vec<_>>() != parameter_shapes(&model) {
            return Err(GcqError::decode(
                "checkpoint",
                "optimizer state does not match the model",
            ));
        }
        let mut adam = checkpoint.adam;
        adam.lr = config.lr;
        Ok(Trainer {
            model,
            config,
            adam,
            epoch: checkpoint.epoch,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            encoder: self.model.encoder.clone(),
            decoder: self.model.decoder.clone(),
            epoch: self.epoch,
            adam: self.adam.clone(),
            codebook: if self.model.codebook.is_learnable() {
                Some(self.model.codebook.table()?)
            } else {
                None
            },
        })
    }

    /// Runs one epoch over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &Prepared, eval: Option<&Prepared>) -> Result<MetricsRow> {
        let last_good = self.checkpoint()?;
        let diverged = |epoch: usize| GcqError::TrainingDiverged {
            epoch,
            last_good: Box::new(last_good.clone()),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut usage: Vec<Vec<usize>> = self.model.codebook.factors().iter().map(|f| vec![0; f.len()]).collect();
        let mut tuples = std::collections::HashSet::new();
        let (mut recon_sum, mut commit_sum, mut cb_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(self.config.batch_size.max(1)) {
            let stats = match self.train_step(data, batch) {
                Ok(s) => s,
                Err(GcqError::NonFinite(_)) => return Err(diverged(self.epoch + 1)),
                Err(e) => return Err(e),
            };
            if !stats.total.is_finite() {
                return Err(diverged(self.epoch + 1));
            }
            recon_sum += stats.reconstruction;
            commit_sum += stats.commitment;
            cb_sum += stats.codebook.unwrap_or(0.0);
            batches += 1;
            for bases in stats.bases {
                for (j, &b) in bases.iter().enumerate() {
                    usage[j][b] += 1;
                }
                tuples.insert(bases);
            }
        }
        self.epoch += 1;
        if self.model.codebook.is_learnable() {
            self.model.codebook.check_closure()?;
        }
        let batches = batches.max(1) as f64;
        let recon_mse = recon_sum / batches;
        let mut row = MetricsRow {
            epoch: self.epoch,
            recon_mse,
            commit_loss: commit_sum / batches,
            psnr_reconstruction: psnr(recon_mse),
            psnr_prediction: [f64::NAN; 3],
            codes_used: tuples.len(),
            usage,
            codebook_term: self.model.codebook.is_learnable().then_some(cb_sum / batches),
        };
        if let Some(eval) = eval {
            let report = evaluate(&self.model, eval, self.config.init_len)?;
            row.psnr_reconstruction = report.psnr_reconstruction;
            row.psnr_prediction = report.psnr_prediction;
        }
        Ok(row)
    }

    fn train_step(&mut self, data: &Prepared, batch: &[usize]) -> Result<StepStats> {
        let model = &self.model;
        let obs = model.observation_dim();
        let rows: usize = batch.iter().map(|&b| data.frames[b].nrows()).sum();
        let mut raw = Array2::zeros((rows, obs));
        let mut r0 = 0;
        for &b in batch {
            let n = data.frames[b].nrows();
            raw.slice_mut(s![r0..r0 + n, ..]).assign(&data.frames[b]);
            r0 += n;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(model.normalize_input(&raw));
        let (s_var, enc_vars) = model.encoder.forward_tape(&mut tape, x)?;
        let s_val = tape.value(s_var).clone();
        let mut s_hat = Array2::zeros(s_val.dim());
        let mut row_indices = Vec::with_capacity(rows);
        let mut bases = Vec::with_capacity(batch.len());
        r0 = 0;
        for &b in batch {
            let n = data.frames[b].nrows();
            let q = quantize(
                &s_val.slice(s![r0..r0 + n, ..]).to_owned(),
                &data.actions[b],
                &model.codebook,
                model.config.metric,
            )?;
            s_hat.slice_mut(s![r0..r0 + n, ..]).assign(&q.s_hat);
            for t in 0..n {
                row_indices.push(q.indices.iter().map(|path| path[t]).collect::<Vec<_>>());
            }
            bases.push(q.bases);
            r0 += n;
        }
        let st = tape.straight_through(s_var, s_hat.clone())?;
        let (o_hat, dec_vars) = model.decoder.forward_tape(&mut tape, st)?;
        let o = tape.leaf(raw);
        let mut loss = gcq_loss_graph(&mut tape, o, o_hat, s_var, &s_hat, self.config.beta);
        let mut proto_vars: Vec<Var> = Vec::new();
        if model.codebook.is_learnable() {
            proto_vars = (0..model.codebook.m())
                .map(|j| {
                    let p = model.codebook.prototype(j);
                    tape.leaf(Array2::from_shape_vec((1, p.len()), p.to_vec()).unwrap())
                })
                .collect();
            let q_var = learnable_quantized_graph(&mut tape, &model.codebook, &proto_vars, &row_indices)?;
            loss = add_codebook_term(&mut tape, loss, s_var, q_var, self.config.gamma);
        }
        let stats = StepStats {
            total: tape.scalar(loss.total),
            reconstruction: tape.scalar(loss.reconstruction),
            commitment: tape.scalar(loss.commitment),
            codebook: loss.codebook.map(|v| tape.scalar(v)),
            bases,
        };
        if !stats.total.is_finite() {
            return Err(GcqError::NonFinite("training loss".into()));
        }
        let mut grads = tape.backward(loss.total)?;
        let vars: Vec<Var> = enc_vars
            .params
            .iter()
            .chain(dec_vars.params.iter())
            .chain(proto_vars.iter())
            .copied()
            .collect();
        let shapes = parameter_shapes(&self.model);
        let grad_list: Vec<Array2<f64>> = vars
            .iter()
            .zip(&shapes)
            .map(|(&v, &shape)| grads.take(v).unwrap_or_else(|| Array2::zeros(shape)))
            .collect();
        if grad_list.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(GcqError::NonFinite("gradient".into()));
        }
        let mut protos: Vec<Array2<f64>> = (0..proto_vars.len())
            .map(|j| {
                let p = self.model.codebook.prototype(j);
                Array2::from_shape_vec((1, p.len()), p.to_vec()).unwrap()
            })
            .collect();
        {
            let mut params = self.model.encoder.params_mut();
            params.extend(self.model.decoder.params_mut());
            params.extend(protos.iter_mut());
            self.adam.update(&mut params, &grad_list)?;
        }
        for (j, p) in protos.iter().enumerate() {
            self.model.codebook.set_prototype(j, p.as_slice().unwrap())?;
        }
        Ok(stats)
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch` after each.
    pub fn fit<F: FnMut(&MetricsRow, &Trainer) -> Result<()>>(
        &mut self,
        data: &Prepared,
        eval: Option<&Prepared>,
        mut on_epoch: F,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            let row = self.train_epoch(data, eval)?;
            on_epoch(&row, self)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

struct StepStats {
    total: f64,
    reconstruction: f64,
    commitment: f64,
    codebook: Option<f64>,
    bases: Vec<Vec<usize>>,
}

fn parameter_shapes(model: &WorldModel) -> Vec<(usize, usize)> {
    let mut shapes: Vec<(usize, usize)> = model
        .encoder
        .params()
        .iter()
        .chain(model.decoder.params().iter())
        .map(|p| p.dim())
        .collect();
    if model.codebook.is_learnable() {
        shapes.extend(model.codebook.factors().iter().map(|f| (1, f.dim())));
    }
    shapes
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recon_mse: f64,
    pub psnr_reconstruction: f64,
    pub psnr_prediction: [f64; 3],
}

/// Reconstruction error of whole quantized sequences, and prediction error
/// [`HORIZONS`] actions past an `init_len`-frame initialization.
pub fn evaluate(model: &WorldModel, data: &Prepared, init_len: usize) -> Result<EvalReport> {
    let mut recon = (0.0, 0usize);
    let mut pred = [(0.0, 0usize); 3];
    for (frames, actions) in data.frames.iter().zip(&data.actions) {
        let q = model.quantize_frames(frames, actions)?;
        let out = model.decode(&q.s_hat)?;
        recon.0 += mse(out.as_slice().unwrap(), frames.as_standard_layout().as_slice().unwrap());
        recon.1 += 1;
        let p = init_len.max(1);
        let max_h = HORIZONS[HORIZONS.len() - 1];
        if frames.nrows() >= p + max_h {
            let init: Vec<crate::gridworld::Frame> = (0..p)
                .map(|t| crate::gridworld::Frame {
                    height: 1,
                    width: frames.ncols(),
                    pixels: frames.row(t).iter().map(|&x| x as f32).collect(),
                })
                .collect();
            let prediction = predict(model, &init, &actions[..p - 1], &actions[p - 1..p - 1 + max_h])?;
            for (k, &h) in HORIZONS.iter().enumerate() {
                let truth = frames.row(p - 1 + h);
                let guess = prediction.frames.row(h);
                pred[k].0 += mse(guess.as_slice().unwrap(), truth.as_slice().unwrap());
                pred[k].1 += 1;
            }
        }
    }
    let recon_mse = recon.0 / recon.1.max(1) as f64;
    let psnr_prediction = pred.map(|(sum, count)| if count == 0 { f64::NAN } else { psnr(sum / count as f64) });
    Ok(EvalReport {
        recon_mse,
        psnr_reconstruction: psnr(recon_mse),
        psnr_prediction,
    })
}

pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricsRow], header: bool) -> Result<()> {
    if header {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    for row in rows {
        writeln!(w, "{}", row.csv())?;
    }
    Ok(())
}
