//! Perturbation tests of the slice/phase decoding order: changing latent
//! values of one (slice, phase) must leave every distribution parameter,
//! residual prediction and skip decision of that step and all earlier steps
//! bit-identical, while some later step reacts.

#[macro_use]
mod common;

use common::{perturb_params, rng, uniform, zero_params};
use lic_autodiff::{Graph, Tensor};
use lic_core::coding::codec::EncodeHandler;
use lic_core::config::CodecConfig;
use lic_core::latent::{legal_contexts, Phase};
use lic_core::model::{run_schedule, Model, PhaseCtx, PhaseHandler, PhaseOut};
use lic_core::params::Bound;
use lic_core::Result;

#[derive(Clone, Debug, PartialEq)]
struct Record {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    r: Vec<f64>,
    eps: Option<Vec<f64>>,
    skip: Option<Vec<f64>>,
}

struct Recorder {
    inner: EncodeHandler,
    records: Vec<Record>,
}

impl<'g> PhaseHandler<'g> for Recorder {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>> {
        assert_eq!(self.records.len(), 2 * ctx.slice + ctx.phase.index(), "schedule order");
        self.records.push(Record {
            mu: ctx.params.mu.value().data().to_vec(),
            sigma: ctx.params.sigma.value().data().to_vec(),
            r: ctx.r.value().data().to_vec(),
            eps: ctx.eps.map(|e| e.value().data().to_vec()),
            skip: ctx.skip.map(|s| s.data().to_vec()),
        });
        self.inner.phase(ctx)
    }
}

const H: usize = 6;
const W: usize = 6;

fn records(model: &Model, y: &Tensor, hyper: &Tensor) -> Vec<Record> {
    let g = Graph::inference();
    let p = Bound::new(&g, &model.store);
    let mut rec = Recorder { inner: EncodeHandler::new(y, model.cfg.num_slices, false, false).unwrap(), records: Vec::new() };
    run_schedule(model, &p, g.constant(hyper.clone()), true, &mut rec).unwrap();
    rec.records
}

/// Adds a large offset to every element of slice `j` at the positions of
/// `phase`.
fn perturb(y: &Tensor, cfg: &CodecConfig, j: usize, phase: Phase) -> Tensor {
    let cs = cfg.slice_ch();
    let mask = lic_core::latent::CheckerboardMask::new(H, W);
    let mut y = y.clone();
    for c in j * cs..(j + 1) * cs {
        for t in 0..H * W {
            if mask.is_in(phase, t) {
                y.data_mut()[c * H * W + t] += 7.3;
            }
        }
    }
    y
}

const PATH_INPUTS: [&str; 8] = [
    "in_inter_local.",
    "in_inter_global.",
    "in_intra_local.",
    "in_intra_global.",
    "lrp.*.in_prev.",
    "lrp.*.in_anchor.",
    "skip.*.in_prev.",
    "skip.*.in_anchor.",
];

fn matches_input(name: &str, pattern: &str) -> bool {
    match pattern.split_once(".*.") {
        Some((head, tail)) => name.starts_with(&format!("{head}.")) && name.contains(&format!(".{tail}")),
        None => name.starts_with("ep.") && name.contains(&format!(".{pattern}")),
    }
}

/// Tiny model with random parameters where only the context inputs accepted
/// by `keep` are live.
fn model_with(keep: impl Fn(&str) -> bool) -> Model {
    let mut model = Model::new(CodecConfig::tiny()).unwrap();
    perturb_params(&mut model.store, &mut rng(41), 0.4);
    zero_params(&mut model.store, |n| PATH_INPUTS.iter().any(|p| matches_input(n, p)) && !keep(n));
    model
}

fn inputs(cfg: &CodecConfig) -> (Tensor, Tensor) {
    let y = uniform(&mut rng(42), &[1, cfg.m, H, W], -4.0, 4.0);
    let hyper = uniform(&mut rng(43), &[1, 2 * cfg.m, H, W], -1.0, 1.0);
    (y, hyper)
}

/// Checks order invariance for every perturbation site and returns, per
/// site, which later steps changed and in which field.
fn sweep(model: &Model) -> Vec<((usize, Phase), Vec<(usize, &'static str)>)> {
    let cfg = &model.cfg;
    let (y, hyper) = inputs(cfg);
    let base = records(model, &y, &hyper);
    let mut out = Vec::new();
    for j in 0..cfg.num_slices {
        for ph in Phase::BOTH {
            let site = 2 * j + ph.index();
            let moved = records(model, &perturb(&y, cfg, j, ph), &hyper);
            for (step, (a, b)) in base.iter().zip(&moved).enumerate().take(site + 1) {
                assert_eq!(a, b, "perturbing slice {j} {} changed step {step}", ph.name());
            }
            let mut changed = Vec::new();
            for (step, (a, b)) in base.iter().zip(&moved).enumerate().skip(site + 1) {
                for (field, differs) in [
                    ("mu", a.mu != b.mu),
                    ("sigma", a.sigma != b.sigma),
                    ("r", a.r != b.r),
                    ("eps", a.eps != b.eps),
                ] {
                    if differs {
                        changed.push((step, field));
                    }
                }
            }
            out.push(((j, ph), changed));
        }
    }
    out
}

fn reacts(report: &[((usize, Phase), Vec<(usize, &str)>)], site: (usize, Phase), step: usize, field: &str) -> bool {
    report.iter().find(|(s, _)| *s == site).is_some_and(|(_, ch)| ch.contains(&(step, field)))
}

const ANCHOR: Phase = Phase::Anchor;
const NON_ANCHOR: Phase = Phase::NonAnchor;

suite! {
    fn all_paths_together() {
        let model = model_with(|_| true);
        let report = sweep(&model);
        // every site except the very last influences something later
        for ((j, ph), changed) in &report {
            if 2 * j + ph.index() < 2 * model.cfg.num_slices - 1 {
                assert!(!changed.is_empty(), "slice {j} {} influences nothing", ph.name());
            }
        }
    }

    fn inter_local_path() {
        let report = sweep(&model_with(|n| matches_input(n, "in_inter_local.")));
        assert!(reacts(&report, (0, ANCHOR), 2, "mu"));
        assert!(reacts(&report, (1, NON_ANCHOR), 7, "sigma"));
        assert!(!reacts(&report, (0, ANCHOR), 1, "mu"), "inter-slice context must not reach the same slice");
    }

    fn inter_global_path() {
        let report = sweep(&model_with(|n| matches_input(n, "in_inter_global.")));
        assert!(reacts(&report, (0, NON_ANCHOR), 2, "mu"));
        assert!(reacts(&report, (2, ANCHOR), 6, "sigma"));
        assert!(!reacts(&report, (0, ANCHOR), 1, "mu"));
    }

    fn intra_local_path() {
        let report = sweep(&model_with(|n| matches_input(n, "in_intra_local.")));
        for j in 0..4 {
            assert!(reacts(&report, (j, ANCHOR), 2 * j + 1, "mu"), "slice {j}");
        }
        // only the current slice's anchors feed it
        assert!(!reacts(&report, (0, ANCHOR), 3, "mu"));
    }

    fn intra_global_path() {
        let report = sweep(&model_with(|n| matches_input(n, "in_intra_global.") && !n.starts_with("ep.0.")));
        assert!(reacts(&report, (1, ANCHOR), 3, "mu"));
        // the previous slice guides the similarity
        assert!(reacts(&report, (1, NON_ANCHOR), 5, "mu"));
        assert!(!reacts(&report, (0, ANCHOR), 1, "mu"));
    }

    fn hyperprior_guided_path() {
        let report = sweep(&model_with(|n| n.starts_with("ep.0.1.in_intra_global.")));
        assert!(reacts(&report, (0, ANCHOR), 1, "mu"));
        assert!(reacts(&report, (0, ANCHOR), 1, "sigma"));
        assert!(report.iter().all(|(_, ch)| ch.iter().all(|&(step, _)| step == 1)));
    }

    fn residual_predictor_path() {
        let report = sweep(&model_with(|n| n.starts_with("lrp.")));
        assert!(reacts(&report, (0, ANCHOR), 1, "r"));
        assert!(reacts(&report, (0, NON_ANCHOR), 2, "r"));
        assert!(reacts(&report, (2, NON_ANCHOR), 7, "r"));
        for (_, ch) in &report {
            assert!(ch.iter().all(|&(_, f)| f == "r"), "{ch:?}");
        }
    }

    fn skip_predictor_path() {
        let report = sweep(&model_with(|n| n.starts_with("skip.")));
        assert!(reacts(&report, (0, ANCHOR), 1, "eps"));
        assert!(reacts(&report, (1, NON_ANCHOR), 4, "eps"));
        for (_, ch) in &report {
            assert!(ch.iter().all(|&(_, f)| f == "eps"), "{ch:?}");
        }
    }

    fn legal_context_sets() {
        let cfg = CodecConfig::tiny();
        assert_eq!(legal_contexts(&cfg, 0, ANCHOR), vec!["hyper"]);
        assert_eq!(legal_contexts(&cfg, 0, NON_ANCHOR), vec!["hyper", "intra_local", "intra_global"]);
        assert_eq!(legal_contexts(&cfg, 2, ANCHOR), vec!["hyper", "inter_local", "inter_global"]);
        let no_hgcp = CodecConfig { ablation: lic_core::config::Ablation { hgcp: false, ..cfg.ablation }, ..cfg.clone() };
        assert_eq!(legal_contexts(&no_hgcp, 0, NON_ANCHOR), vec!["hyper", "intra_local"]);
        let hp = CodecConfig { hyperprior_only: true, ..cfg };
        assert_eq!(legal_contexts(&hp, 3, NON_ANCHOR), vec!["hyper"]);
    }
}
