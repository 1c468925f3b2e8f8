use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{AttackKind, DatasetKind, ExperimentConfig};
use super::output::MetricsRow;
use super::HarnessError;
use crate::attacks::{
    active_label_poison, infer_labels, GrAttacker, GrBackdoorConfig, GradientRecorder, InferenceConfig, Observation,
    SharedLedger,
};
use crate::data::{
    apply_trigger, load_mnist, select_targets, synth_blobs, vertical_split, Dataset, PartitionSpec, Split, TriggerSpec,
};
use crate::defenses::{pd_matrix, train_coae, CoAe, CoaeConfig, Defense, DefenseMode, NoiseKind, PdMatrix, TrainingReport};
use crate::numerics::{Mlp, Tensor};
use crate::protocol::{ActiveParty, PassiveHooks, PassiveParty, VflSession};

/// Independent RNG streams derived from one run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Trigger = 3,
    Targets = 4,
    Init = 5,
    Batches = 6,
    Defense = 7,
    Attack = 8,
    Coae = 9,
    Tau = 10,
    Inference = 11,
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ctx<E: Into<crate::Error>>(context: &str) -> impl FnOnce(E) -> HarnessError + '_ {
    move |e| HarnessError::Stage {
        context: context.to_string(),
        source: Box::new(e.into()),
    }
}

type CoaeKey = (usize, u64, u64, u64, usize, u64, usize, Option<usize>);
type CoaeSlot = Arc<OnceLock<Result<Arc<CoAe>, String>>>;

/// Trained CoAEs shared across runs in this process.
fn coae_cache() -> &'static Mutex<HashMap<CoaeKey, CoaeSlot>> {
    static CACHE: OnceLock<Mutex<HashMap<CoaeKey, CoaeSlot>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

pub fn cached_coae(cfg: &CoaeConfig) -> Result<Arc<CoAe>, HarnessError> {
    let key = (
        cfg.classes,
        cfg.lambda1.to_bits(),
        cfg.lambda2.to_bits(),
        cfg.seed,
        cfg.steps,
        cfg.lr.to_bits(),
        cfg.batch,
        cfg.hidden,
    );
    let slot = Arc::clone(coae_cache().lock().expect("cache lock").entry(key).or_default());
    slot.get_or_init(|| train_coae(cfg).map(Arc::new).map_err(|e| e.to_string()))
        .clone()
        .map_err(|m| HarnessError::Stage {
            context: "defense (CoAE training)".into(),
            source: Box::new(crate::Error::Defense(crate::defenses::DefenseError::TrainingFailed(m))),
        })
}

/// Everything a run needs, built deterministically from `(config, seed)`.
pub struct Prepared {
    pub session: VflSession,
    pub train: Dataset,
    pub test: Dataset,
    /// Feature views in session party order.
    pub train_views: Vec<Tensor>,
    pub test_views: Vec<Tensor>,
    /// Feature block of each session party.
    pub partition: PartitionSpec,
    pub target_label: usize,
    pub targets: Vec<usize>,
    pub attackers: Vec<usize>,
    pub observations: Option<std::rc::Rc<std::cell::RefCell<Vec<Observation>>>>,
    pub coae_report: Option<TrainingReport>,
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset), HarnessError> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Mnist => {
            let mut train = load_mnist(&d.train_images, &d.train_labels, Split::Train).map_err(ctx("dataset.train_images"))?;
            let mut test = load_mnist(&d.test_images, &d.test_labels, Split::Test).map_err(ctx("dataset.test_images"))?;
            if let Some(n) = d.train_limit {
                train = train.truncate(n);
            }
            if let Some(n) = d.test_limit {
                test = test.truncate(n);
            }
            Ok((train, test))
        }
        DatasetKind::Blobs => {
            let all = synth_blobs(d.classes, d.dim, d.per_class, d.spread, derive_seed(seed, Stream::Data))
                .map_err(ctx("dataset"))?;
            Ok(all.train_test_split(d.test_fraction, derive_seed(seed, Stream::Split)))
        }
    }
}

/// Session party `k < K-1` gets block `k + 1`; the active party gets block 0.
fn session_partition(cfg: &ExperimentConfig, ds: &Dataset) -> PartitionSpec {
    let k = cfg.parties;
    let blocks = match (cfg.dataset.kind, ds.image_shape()) {
        (DatasetKind::Mnist, Some((rows, cols))) => PartitionSpec::image_columns(rows, cols, k),
        _ => PartitionSpec::contiguous(ds.dim(), k),
    };
    let mut order: Vec<Vec<std::ops::Range<usize>>> = (1..k).map(|p| blocks.ranges(p).to_vec()).collect();
    order.push(blocks.ranges(0).to_vec());
    PartitionSpec::new(order)
}

fn triggers_for(cfg: &ExperimentConfig, ds: &Dataset, part: &PartitionSpec, attackers: &[usize]) -> Vec<TriggerSpec> {
    if cfg.trigger.distributed {
        return TriggerSpec::block_corners(part, attackers, 255);
    }
    let owner = attackers[0];
    match ds.image_shape() {
        Some((28, 28)) => vec![TriggerSpec::mnist_corner().owned_by(owner)],
        _ => {
            let last = *part.indices(owner).iter().max().expect("nonempty block");
            vec![TriggerSpec::feature(last, 1.0).owned_by(owner)]
        }
    }
}

/// `k` ids of samples whose label differs from `tau`.
fn pick_non_target(ds: &Dataset, tau: usize, k: usize, seed: u64) -> Result<Vec<usize>, HarnessError> {
    let mut pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] != tau).collect();
    if pool.len() < k {
        return Err(HarnessError::Config {
            path: "trigger".into(),
            message: format!("cannot trigger {k} of {} non-target samples", pool.len()),
        });
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut ids = pool[..k].to_vec();
    ids.sort_unstable();
    Ok(ids)
}

fn build_defense(cfg: &ExperimentConfig, classes: usize, seed: u64) -> Result<(Defense, Option<TrainingReport>), HarnessError> {
    let d = &cfg.defense;
    Ok(match d.mode {
        DefenseMode::None => (Defense::None, None),
        DefenseMode::DpGaussian => (
            Defense::Noise {
                kind: NoiseKind::Gaussian,
                scale: d.sigma,
                clip: d.clip,
            },
            None,
        ),
        DefenseMode::DpLaplace => (
            Defense::Noise {
                kind: NoiseKind::Laplace,
                scale: d.b,
                clip: d.clip,
            },
            None,
        ),
        DefenseMode::Sparsify => (Defense::Sparsify { drop_rate: d.drop_rate }, None),
        DefenseMode::Coae => {
            let coae = match &cfg.coae.file {
                Some(path) => Arc::new(CoAe::load(path).map_err(ctx("coae.file"))?),
                None => {
                    let s = &cfg.coae;
                    cached_coae(&CoaeConfig {
                        classes,
                        lambda1: d.lambda1,
                        lambda2: d.lambda2,
                        steps: s.steps,
                        batch: s.batch,
                        lr: s.lr,
                        seed: s.seed.unwrap_or_else(|| derive_seed(seed, Stream::Coae)),
                        hidden: s.hidden,
                        max_attempts: 5,
                    })?
                }
            };
            if coae.classes() != classes {
                return Err(HarnessError::Config {
                    path: "coae.file".into(),
                    message: format!("CoAE has {} classes, data has {classes}", coae.classes()),
                });
            }
            let report = coae.report().cloned();
            (Defense::Coae(coae), report)
        }
    })
}

/// Builds data, parties, hooks and the session for one seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let (train, test) = load_data(cfg, seed)?;
    let classes = train.classes();
    let k = cfg.parties;
    let partition = session_partition(cfg, &train);
    let passives = k - 1;
    let attackers: Vec<usize> = match cfg.attack.kind {
        AttackKind::LabelInference => vec![cfg.attack.attacker.unwrap_or(0)],
        _ if cfg.trigger.distributed => (0..passives).collect(),
        _ => vec![cfg.attack.attacker.unwrap_or(passives - 1)],
    };
    let tau = match cfg.trigger.target_label {
        Some(t) if t < classes => t,
        Some(t) => {
            return Err(HarnessError::Config {
                path: "trigger.target_label".into(),
                message: format!("{t} outside 0..{classes}"),
            })
        }
        None => ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Tau)).random_range(0..classes),
    };

    let n_train = cfg.trigger.poison_train.unwrap_or(train.len().div_ceil(100));
    let n_test = cfg.trigger.poison_test.unwrap_or(match cfg.dataset.kind {
        DatasetKind::Mnist => 100.min(test.len()),
        DatasetKind::Blobs => test.len().div_ceil(20),
    });
    let trig_seed = derive_seed(seed, Stream::Trigger);
    let train_ids = pick_non_target(&train, tau, n_train, trig_seed)?;
    let test_ids = pick_non_target(&test, tau, n_test, trig_seed.wrapping_add(1))?;
    let mut train = train;
    let mut test = test;
    for spec in triggers_for(cfg, &train, &partition, &attackers) {
        train = apply_trigger(&train, &spec, &train_ids, Some(&partition)).map_err(ctx("trigger"))?;
        test = apply_trigger(&test, &spec, &test_ids, Some(&partition)).map_err(ctx("trigger"))?;
    }

    let targets = if cfg.attack.kind == AttackKind::GradReplacement {
        select_targets(&train, tau, cfg.attack.targets, derive_seed(seed, Stream::Targets)).map_err(ctx("attack.targets"))?
    } else {
        Vec::new()
    };
    let labels = if cfg.attack.kind == AttackKind::ActivePoison {
        active_label_poison(train.labels(), &train_ids, tau)
    } else {
        train.labels().to_vec()
    };

    let train_views = vertical_split(&train, &partition).map_err(ctx("partition"))?;
    let test_views = vertical_split(&test, &partition).map_err(ctx("partition"))?;
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init));
    let models: Vec<Mlp> = train_views
        .iter()
        .map(|v| Mlp::two_layer(v.cols(), cfg.model.hidden, classes, &mut init))
        .collect();

    let (defense, coae_report) = build_defense(cfg, classes, seed)?;
    let attack_seed = derive_seed(seed, Stream::Attack);
    let shared = SharedLedger::shared();
    let mut observations = None;
    let mut passive_parties = Vec::with_capacity(passives);
    let mut models = models.into_iter();
    for p in 0..passives {
        let mut party = PassiveParty::new(models.next().expect("one model per party"), train_views[p].clone());
        if attackers.contains(&p) {
            let hooks: Option<Box<dyn PassiveHooks>> = match cfg.attack.kind {
                AttackKind::GradReplacement => Some(Box::new(
                    GrAttacker::colluding(
                        GrBackdoorConfig {
                            target_label: tau,
                            targets: targets.clone(),
                            backdoor: train_ids.clone(),
                            amplify: cfg.attack.amplify,
                            random_h: cfg.attack.random_h,
                        },
                        attack_seed.wrapping_add(p as u64),
                        shared.clone(),
                    )
                    .map_err(ctx("attack"))?,
                )),
                AttackKind::LabelInference => {
                    let (rec, store) = GradientRecorder::new(cfg.attack.rounds.clone());
                    observations = Some(store);
                    Some(Box::new(rec))
                }
                AttackKind::None | AttackKind::ActivePoison => None,
            };
            if let Some(h) = hooks {
                party = party.with_hooks(h);
            }
        }
        passive_parties.push(party);
    }
    let active = ActiveParty::new(
        models.next().expect("active model"),
        train_views[passives].clone(),
        labels,
        classes,
        defense,
        derive_seed(seed, Stream::Defense),
    );
    let session = VflSession::new(
        passive_parties,
        active,
        cfg.lr(),
        cfg.train.batch_size,
        derive_seed(seed, Stream::Batches),
    )
    .map_err(ctx("session"))?;
    Ok(Prepared {
        session,
        train,
        test,
        train_views,
        test_views,
        partition,
        target_label: tau,
        targets,
        attackers,
        observations,
        coae_report,
    })
}

/// Label-inference results over all recorded rounds.
#[derive(Debug, Clone, Serialize)]
pub struct InferenceSummary {
    pub truth: Vec<usize>,
    pub restored: Vec<usize>,
    pub recovery_rate: f64,
    pub mean_d_final: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub target_label: usize,
    pub inference: Option<InferenceSummary>,
    pub coae_report: Option<TrainingReport>,
}

impl RunOutcome {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("at least the final row")
    }

    pub fn pd_matrix(&self, classes: usize) -> Option<PdMatrix> {
        self.inference.as_ref().map(|i| pd_matrix(&i.truth, &i.restored, classes))
    }
}

fn run_inference(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<Option<InferenceSummary>, HarnessError> {
    let Some(store) = &prep.observations else {
        return Ok(None);
    };
    let obs = store.borrow();
    if obs.is_empty() {
        return Err(HarnessError::Config {
            path: "attack.rounds".into(),
            message: "no recorded round was reached during training".into(),
        });
    }
    let (mut truth, mut restored, mut d_sum) = (Vec::new(), Vec::new(), 0.0);
    for (k, o) in obs.iter().enumerate() {
        let icfg = InferenceConfig {
            iters: cfg.attack.iters,
            lr: cfg.attack.lr,
            optimizer: cfg.attack.optimizer,
            seed: derive_seed(seed, Stream::Inference).wrapping_add(k as u64),
        };
        let res = infer_labels(&o.gradient, &o.model, &o.x, &icfg).map_err(ctx("attack (label inference)"))?;
        truth.extend(o.batch.iter().map(|&i| prep.train.labels()[i]));
        restored.extend(res.labels);
        d_sum += res.d_final;
    }
    let hits = truth.iter().zip(&restored).filter(|(a, b)| a == b).count();
    Ok(Some(InferenceSummary {
        recovery_rate: hits as f64 / truth.len() as f64,
        mean_d_final: d_sum / obs.len() as f64,
        truth,
        restored,
    }))
}

/// Trains and evaluates one seed; one row per epoch plus a final row.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome, HarnessError> {
    let start = Instant::now();
    let mut prep = prepare(cfg, seed)?;
    let hash = cfg.hash();
    let backdoor_target = Some(prep.target_label);
    let wall = |t: &Instant| cfg.record_wall_time.then(|| t.elapsed().as_secs_f64());
    let mut rows = Vec::new();
    let mut last = None;
    for epoch in 1..=cfg.epochs() {
        prep.session.train_epoch(cfg.train.max_rounds).map_err(ctx("train"))?;
        let m = prep
            .session
            .evaluate(&prep.test_views, prep.test.labels(), prep.test.trigger_mask(), backdoor_target)
            .map_err(ctx("evaluate"))?;
        rows.push(MetricsRow::new(&hash, seed, "epoch", epoch, &m, None, None, wall(&start)));
        last = Some(m);
    }
    let m = match last {
        Some(m) => m,
        None => prep
            .session
            .evaluate(&prep.test_views, prep.test.labels(), prep.test.trigger_mask(), backdoor_target)
            .map_err(ctx("evaluate"))?,
    };
    let inference = run_inference(cfg, &prep, seed)?;
    rows.push(MetricsRow::new(
        &hash,
        seed,
        "final",
        cfg.epochs(),
        &m,
        inference.as_ref().map(|i| i.recovery_rate),
        inference.as_ref().map(|i| i.mean_d_final),
        wall(&start),
    ));
    Ok(RunOutcome {
        seed,
        rows,
        target_label: prep.target_label,
        inference,
        coae_report: prep.coae_report.clone(),
    })
}

/// Seeds `seed, seed + 1, ...` for the configured repeats.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>, HarnessError> {
    (0..cfg.repeats as u64)
        .map(|r| run_experiment(cfg, cfg.seed.wrapping_add(r)))
        .collect()
}
