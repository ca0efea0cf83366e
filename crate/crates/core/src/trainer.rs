//! Staged training.
//!
//! * Stage 0 warms up both encoders with a Two-Tower contrastive loss between
//!   the text feature and the first video proxy token, then copies the text
//!   encoder into the generator.
//! * Stage 1 trains only the generator with the reconstruction loss; every
//!   other parameter is frozen and checked bit-for-bit afterwards.
//! * Stage 2 trains everything with `L_cons(t, v) + alpha * L_recon(t_p, t)`,
//!   evaluates on the validation split periodically and keeps the best
//!   weights.
//!
//! Training batches come only from the train split and evaluation only from
//! the validation split of the configured dataset; [`AccessLog`] records
//! every read so this can be checked after the fact.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{hash_text, RunConfig};
use crate::data::{PairedDataset, Pair, Split};
use crate::error::{PigError, Result};
use crate::model::{PigModel, GENERATOR_PREFIX};
use crate::nn::{Forward, ParamStore};
use crate::objectives::{self, RetrievalMetrics};
use crate::optim::Adam;
use crate::serving;

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u64,
    pub step: u64,
    pub l_cons: f64,
    pub l_recon: f64,
    pub total: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "step={} l_cons={:.6} l_recon={:.6} total={:.6}",
            self.step, self.l_cons, self.l_recon, self.total
        )
    }
}

/// Which pairs the trainer has read, by split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessLog {
    pub train_ids: BTreeSet<u64>,
    pub val_ids: BTreeSet<u64>,
    pub reads: u64,
}

/// Read-only view of the configured dataset that records every access.
struct DataAccess<'d> {
    data: &'d PairedDataset,
    train: Vec<&'d Pair>,
    val: Vec<&'d Pair>,
    log: RefCell<AccessLog>,
}

impl<'d> DataAccess<'d> {
    fn new(data: &'d PairedDataset) -> Self {
        DataAccess {
            data,
            train: data.split(Split::Train),
            val: data.split(Split::Val),
            log: RefCell::new(AccessLog::default()),
        }
    }

    fn train(&self, indices: &[usize]) -> Vec<&'d Pair> {
        let mut log = self.log.borrow_mut();
        indices
            .iter()
            .map(|&i| {
                let p = self.train[i];
                log.train_ids.insert(p.id);
                log.reads += 1;
                p
            })
            .collect()
    }

    fn all_train(&self) -> Vec<&'d Pair> {
        self.train((0..self.train.len()).collect::<Vec<_>>().as_slice())
    }

    fn all_val(&self) -> Vec<&'d Pair> {
        let mut log = self.log.borrow_mut();
        for p in &self.val {
            log.val_ids.insert(p.id);
            log.reads += 1;
        }
        self.val.clone()
    }
}

/// Outcome of a stage-2 run.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Summary {
    pub best_step: u64,
    pub best: Option<RetrievalMetrics>,
    pub stopped_early: bool,
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub model: PigModel,
    pub optimizer: Adam,
    pub step: u64,
    /// Last completed stage.
    pub stage: u64,
    pub history: Vec<StepLog>,
    /// `(step, metrics)` of every validation run.
    pub evals: Vec<(u64, RetrievalMetrics)>,
    rng: ChaCha8Rng,
    data: DataAccess<'d>,
    sink: Option<Box<dyn Write + 'd>>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: RunConfig, data: &'d PairedDataset) -> Result<Self> {
        cfg.validate()?;
        let mut model = PigModel::new(&cfg.model, cfg.train.seed)?;
        model.set_tau(cfg.train.tau_init);
        let optimizer = Adam::new(
            &model.store,
            cfg.train.stage0_lr,
            cfg.train.beta1,
            cfg.train.beta2,
            cfg.train.adam_eps,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(1);
        Self::assemble(cfg, data, model, optimizer, rng, 0, 0)
    }

    /// Resumes from a checkpoint.
    pub fn from_checkpoint(ck: Checkpoint, data: &'d PairedDataset) -> Result<Self> {
        let rng = ck.rng.restore();
        Self::assemble(ck.config, data, ck.model, ck.optimizer, rng, ck.step, ck.stage)
    }

    fn assemble(
        cfg: RunConfig,
        data: &'d PairedDataset,
        model: PigModel,
        optimizer: Adam,
        rng: ChaCha8Rng,
        step: u64,
        stage: u64,
    ) -> Result<Self> {
        if data.config_hash() != hash_text(&cfg.data_text()) {
            return Err(PigError::Data(
                "dataset was not generated from the configured data section".into(),
            ));
        }
        let access = DataAccess::new(data);
        if access.train.len() < cfg.train.batch_size {
            return Err(PigError::Config(format!(
                "train split has {} pairs, fewer than batch size {}",
                access.train.len(),
                cfg.train.batch_size
            )));
        }
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            step,
            stage,
            history: Vec::new(),
            evals: Vec::new(),
            rng,
            data: access,
            sink: None,
        })
    }

    /// Sends each step's log line to `w` as well as to the `log` facade.
    pub fn set_log_sink(&mut self, w: Box<dyn Write + 'd>) {
        self.sink = Some(w);
    }

    pub fn access_log(&self) -> AccessLog {
        self.data.log.borrow().clone()
    }

    /// Confirms that every read came from the configured dataset's train
    /// split (for optimization) or validation split (for evaluation).
    pub fn verify_access(&self) -> Result<()> {
        let log = self.data.log.borrow();
        for (ids, split) in [(&log.train_ids, Split::Train), (&log.val_ids, Split::Val)] {
            for &id in ids {
                match self.data.data.by_id(id) {
                    Some(p) if p.split == split => {}
                    _ => {
                        return Err(PigError::Invariant(format!(
                            "pair {id} read as {split:?} is not in that split"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            stage: self.stage,
            rng: RngState::capture(&self.rng),
        }
    }

    fn sample_batch(&mut self) -> Vec<&'d Pair> {
        let n = self.data.train.len();
        let idx = rand::seq::index::sample(&mut self.rng, n, self.cfg.train.batch_size).into_vec();
        self.data.train(&idx)
    }

    fn begin_stage(&mut self, lr: f64) {
        self.optimizer.lr = lr;
        self.optimizer.reset();
    }

    fn record(&mut self, stage: u64, l_cons: f64, l_recon: f64, total: f64) -> Result<()> {
        let entry = StepLog {
            stage,
            step: self.step,
            l_cons,
            l_recon,
            total,
        };
        log::debug!("stage={stage} {}", entry.line());
        if let Some(w) = self.sink.as_mut() {
            writeln!(w, "{}", entry.line())?;
        }
        self.history.push(entry);
        Ok(())
    }

    /// Applies one Adam update from gradients produced by [`backprop`].
    fn commit(&mut self, grads: &[(crate::nn::ParamId, Mat)]) -> Result<()> {
        self.optimizer.update(&mut self.model.store, grads)?;
        self.model.clamp_tau(self.cfg.train.tau_max);
        self.step += 1;
        Ok(())
    }

    /// Two-Tower warm-up of both encoders and the temperature.
    pub fn train_stage0(&mut self) -> Result<()> {
        let steps = self.cfg.train.stage0_steps;
        self.model
            .store
            .train_only(&["video.", "text.", "log_tau"]);
        self.begin_stage(self.cfg.train.stage0_lr);
        for _ in 0..steps {
            let batch = self.sample_batch();
            let videos: Vec<_> = batch.iter().map(|p| &p.video).collect();
            let texts: Vec<_> = batch.iter().map(|p| &p.text).collect();
            let model = &self.model;
            let mut f = Forward::train(&model.store);
            let t = model.text_forward(&mut f, &texts)?;
            let enc = model.video.forward(&mut f, &videos)?;
            let first: Vec<usize> = (0..batch.len())
                .map(|i| i * crate::encoders::VIDEO_TOKENS)
                .collect();
            let x = f.g.gather_rows(enc.x_v, &first)?;
            let tau = model.tau_node(&mut f);
            let loss = objectives::info_nce_graph(&mut f.g, t, x, tau)?;
            let (l, grads) = backprop(f, loss, self.step)?;
            self.commit(&grads)?;
            self.record(0, l, 0.0, l)?;
        }
        if steps > 0 {
            self.model.init_generator_from_text();
        }
        self.model.store.set_all_trainable();
        self.stage = 0;
        Ok(())
    }

    /// Generator content rows and text features of every pair in `pairs`,
    /// computed with the current (frozen) encoders.
    fn frozen_features(&self, pairs: &[&Pair]) -> Result<(Vec<Mat>, Mat)> {
        let model = &self.model;
        let mut contents = Vec::with_capacity(pairs.len());
        let mut texts = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(serving::CHUNK) {
            let videos: Vec<_> = chunk.iter().map(|p| &p.video).collect();
            let raw_texts: Vec<_> = chunk.iter().map(|p| &p.text).collect();
            let mut f = Forward::inference(&model.store);
            let enc = model.video.forward(&mut f, &videos)?;
            let (_, x_ip) = model.select_patches(&mut f, &enc)?;
            let content =
                model.generator_content(&mut f, enc.x_v, enc.x_f, x_ip, chunk.len())?;
            let t = model.text_forward(&mut f, &raw_texts)?;
            let len = model.generator.content_len();
            let c = f.value(content);
            for i in 0..chunk.len() {
                contents.push(c.slice(ndarray::s![i * len..(i + 1) * len, ..]).to_owned());
            }
            texts.push(f.value(t).clone());
        }
        let views: Vec<_> = texts.iter().map(|t| t.view()).collect();
        let t = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        Ok((contents, t))
    }

    /// Reconstruction-only training of the generator.
    pub fn train_stage1(&mut self) -> Result<()> {
        let steps = self.cfg.train.stage1_steps;
        self.model.store.train_only(&[GENERATOR_PREFIX]);
        let frozen = |p: &crate::nn::Param| !p.trainable;
        let before = self.model.store.digest_where(frozen);
        self.begin_stage(self.cfg.train.stage1_lr);

        let pairs = self.data.all_train();
        let (contents, texts) = if steps > 0 {
            self.frozen_features(&pairs)?
        } else {
            (Vec::new(), Mat::zeros((0, 0)))
        };
        let n = pairs.len();
        for _ in 0..steps {
            let idx =
                rand::seq::index::sample(&mut self.rng, n, self.cfg.train.batch_size).into_vec();
            let views: Vec<_> = idx.iter().map(|&i| contents[i].view()).collect();
            let content = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
            let target = texts.select(ndarray::Axis(0), &idx);
            let model = &self.model;
            let mut f = Forward::train(&model.store);
            let c = f.constant(content);
            let t = f.constant(target);
            let t_p = model.generator.forward(&mut f, c, idx.len())?.t_p;
            let loss = objectives::recon_loss_graph(&mut f.g, t_p, t)?;
            let (l, grads) = backprop(f, loss, self.step)?;
            self.commit(&grads)?;
            self.record(1, 0.0, l, l)?;
        }

        if self.model.store.digest_where(frozen) != before {
            return Err(PigError::Invariant(
                "a frozen parameter changed during generator pretraining".into(),
            ));
        }
        self.model.store.set_all_trainable();
        self.stage = 1;
        Ok(())
    }

    /// Validation-split metrics of the current model.
    pub fn evaluate_val(&self) -> Result<RetrievalMetrics> {
        evaluate(&self.model, &self.data.all_val())
    }

    /// Joint fine-tuning with early stopping on validation SumR.
    pub fn train_stage2(&mut self) -> Result<Stage2Summary> {
        let tc = self.cfg.train.clone();
        self.model.store.set_all_trainable();
        self.begin_stage(tc.stage2_lr);

        let mut best: Option<(f64, u64, RetrievalMetrics, ParamStore)> = None;
        let mut stale = 0;
        let mut stopped_early = false;
        let start = self.step;
        for s in 1..=tc.stage2_steps {
            let batch = self.sample_batch();
            let videos: Vec<_> = batch.iter().map(|p| &p.video).collect();
            let texts: Vec<_> = batch.iter().map(|p| &p.text).collect();
            let model = &self.model;
            let mut f = Forward::train(&model.store);
            let t = model.text_forward(&mut f, &texts)?;
            let out = model.video_forward(&mut f, &videos)?;
            let tau = model.tau_node(&mut f);
            let l_cons = objectives::info_nce_graph(&mut f.g, t, out.v, tau)?;
            let l_recon = objectives::recon_loss_graph(&mut f.g, out.t_p, t)?;
            let weighted = f.g.scale(l_recon, tc.alpha);
            let total = f.g.add(l_cons, weighted)?;
            let (lc, lr) = (f.value(l_cons)[[0, 0]], f.value(l_recon)[[0, 0]]);
            let (value, grads) = backprop(f, total, self.step)?;
            self.commit(&grads)?;
            self.record(2, lc, lr, value)?;

            if s % tc.eval_every == 0 || s == tc.stage2_steps {
                let m = self.evaluate_val()?;
                log::info!("step={} val {}", self.step, m.record());
                self.evals.push((self.step, m));
                let improved = best.as_ref().is_none_or(|(sum_r, ..)| m.sum_r > *sum_r);
                if improved {
                    best = Some((m.sum_r, self.step, m, self.model.store.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= tc.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        let summary = match best {
            Some((_, step, m, store)) => {
                self.model.store = store;
                Stage2Summary {
                    best_step: step,
                    best: Some(m),
                    stopped_early,
                }
            }
            None => Stage2Summary {
                best_step: start,
                best: None,
                stopped_early,
            },
        };
        self.stage = 2;
        Ok(summary)
    }
}

/// Checks that `loss` is finite and backpropagates it, returning its value
/// and the gradient of every trainable parameter on the tape.
fn backprop(mut f: Forward, loss: Var, step: u64) -> Result<(f64, Vec<(crate::nn::ParamId, Mat)>)> {
    let value = f.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(PigError::Numeric(format!(
            "non-finite loss {value} at step {}",
            step + 1
        )));
    }
    f.g.backward(loss)?;
    Ok((value, f.param_grads()))
}

/// Text-to-video metrics over `pairs`, each text's ground truth being its
/// own video.
pub fn evaluate(model: &PigModel, pairs: &[&Pair]) -> Result<RetrievalMetrics> {
    let videos: Vec<_> = pairs.iter().map(|p| &p.video).collect();
    let texts: Vec<_> = pairs.iter().map(|p| &p.text).collect();
    let v = serving::video_vectors(model, &videos)?;
    let t = serving::text_vectors(model, &texts)?;
    let sim = objectives::similarity_matrix(&t, &v)?;
    let ids: Vec<u64> = pairs.iter().map(|p| p.id).collect();
    objectives::compute_metrics(&sim, &ids, &ids)
}

/// Mean cosine between each video's pseudo-query and its own text feature.
pub fn pseudo_query_cosine(model: &PigModel, pairs: &[&Pair]) -> Result<f64> {
    let videos: Vec<_> = pairs.iter().map(|p| &p.video).collect();
    let texts: Vec<_> = pairs.iter().map(|p| &p.text).collect();
    let t_p = serving::pseudo_query_vectors(model, &videos)?;
    let t = serving::text_vectors(model, &texts)?;
    objectives::mean_row_cosine(&t_p, &t)
}
