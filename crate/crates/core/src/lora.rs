//! Low-rank adapters and the relation LoRA triplet.
//!
//! A triplet holds four adapter sets. With the default `QK|V` placement the
//! Relation set sits on the query and key projections, the two Subject sets on
//! the value projection, and the FFN set on the feed-forward and attention
//! output linears. Every set is instantiated separately for the text and the
//! vision branch.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    Text,
    Vision,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Text, Branch::Vision];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Text => "text",
            Branch::Vision => "vision",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Matrix {
    Q,
    K,
    V,
    FfnIn,
    FfnOut,
    AttnOut,
}

impl Matrix {
    pub const ATTENTION: [Matrix; 3] = [Matrix::Q, Matrix::K, Matrix::V];
    pub const LINEAR: [Matrix; 3] = [Matrix::FfnIn, Matrix::FfnOut, Matrix::AttnOut];

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Q => "q",
            Matrix::K => "k",
            Matrix::V => "v",
            Matrix::FfnIn => "ffn_in",
            Matrix::FfnOut => "ffn_out",
            Matrix::AttnOut => "attn_out",
        }
    }

    pub fn letter(self) -> Option<char> {
        match self {
            Matrix::Q => Some('Q'),
            Matrix::K => Some('K'),
            Matrix::V => Some('V'),
            _ => None,
        }
    }

    /// `(d_out, d_in)` of the base weight this matrix names.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Matrix::FfnIn => (cfg.ffn_hidden(), cfg.d_model),
            Matrix::FfnOut => (cfg.d_model, cfg.ffn_hidden()),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraSet {
    Relation,
    Subject1,
    Subject2,
    Ffn,
}

impl LoraSet {
    pub const ALL: [LoraSet; 4] = [LoraSet::Relation, LoraSet::Subject1, LoraSet::Subject2, LoraSet::Ffn];

    pub fn name(self) -> &'static str {
        match self {
            LoraSet::Relation => "relation",
            LoraSet::Subject1 => "subject1",
            LoraSet::Subject2 => "subject2",
            LoraSet::Ffn => "ffn",
        }
    }
}

/// Where an adapter is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LoraBinding {
    pub layer: usize,
    pub matrix: Matrix,
    pub branch: Branch,
}

impl fmt::Display for LoraBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/layer{}/{}", self.branch.name(), self.layer, self.matrix.name())
    }
}

/// Low-rank delta `scale · up · (down · x)` with `down: r×d_in`, `up: d_out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    pub down: Tensor<S>,
    pub up: Tensor<S>,
    pub scale: S,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn new(down: Tensor<S>, up: Tensor<S>, scale: S) -> Result<Self> {
        match (down.shape(), up.shape()) {
            ([r, _], [_, r2]) if r == r2 && *r > 0 => {}
            (d, u) => return Err(Error::Binding(format!("adapter factors {d:?} and {u:?} disagree on rank"))),
        }
        if scale <= S::zero() {
            return Err(Error::Binding("adapter scale must be positive".into()));
        }
        Ok(Self { down, up, scale })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[0]
    }

    pub fn is_noop(&self) -> bool {
        self.up.data().iter().all(|&x| x == S::zero())
    }

    /// Adapter delta for a batch of row activations `x: n×d_in`.
    pub fn delta(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let down_t = self.down.transpose2()?;
        let up_t = self.up.transpose2()?;
        Ok(x.matmul(&down_t)?.matmul(&up_t)?.map(|v| v * self.scale))
    }
}

/// `x·Wᵀ + Σ_a scale_a · (x·down_aᵀ)·up_aᵀ` on row activations, i.e. the
/// row-batched form of `W·x + Σ scale·up·(down·x)`. `weight` is `d_out×d_in`.
pub fn apply_adapter<S: Scalar>(weight: &Tensor<S>, x: &Tensor<S>, adapters: &[&LoraAdapter<S>]) -> Result<Tensor<S>> {
    let (d_out, d_in) = match weight.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Binding(format!("weight must be a matrix, got {s:?}"))),
    };
    for a in adapters {
        if a.d_in() != d_in || a.d_out() != d_out {
            return Err(Error::Binding(format!(
                "adapter {}→{} does not fit weight {d_in}→{d_out}",
                a.d_in(),
                a.d_out()
            )));
        }
    }
    let mut y = x.matmul(&weight.transpose2()?).map_err(|e| Error::Binding(e.to_string()))?;
    for a in adapters {
        let d = a.delta(x)?;
        y = y.zip_map(&d, |p, q| p + q)?;
    }
    Ok(y)
}

/// Which attention matrices the Relation and Subject sets occupy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub relation: Vec<Matrix>,
    pub subject: Vec<Matrix>,
}

impl Default for Placement {
    fn default() -> Self {
        Self { relation: vec![Matrix::Q, Matrix::K], subject: vec![Matrix::V] }
    }
}

impl Placement {
    /// The four relation|subject layouts compared in the placement ablation.
    pub const PRESETS: [&'static str; 4] = ["V|QK", "Q|KV", "KV|Q", "QK|V"];

    /// Parses `"QK|V"` style strings (relation matrices, then subject matrices).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("placement `{s}` must look like `QK|V` using disjoint letters from Q, K, V"));
        let (rel, sub) = s.split_once('|').ok_or_else(bad)?;
        let letters = |part: &str| -> Result<Vec<Matrix>> {
            let mut out = Vec::new();
            for ch in part.chars().filter(|c| !matches!(c, ' ' | ',')) {
                let m = match ch.to_ascii_uppercase() {
                    'Q' => Matrix::Q,
                    'K' => Matrix::K,
                    'V' => Matrix::V,
                    _ => return Err(bad()),
                };
                if out.contains(&m) {
                    return Err(bad());
                }
                out.push(m);
            }
            Ok(out)
        };
        let p = Self { relation: letters(rel)?, subject: letters(sub)? };
        if p.relation.is_empty() || p.subject.is_empty() || p.relation.iter().any(|m| p.subject.contains(m)) {
            return Err(bad());
        }
        Ok(p)
    }

    pub fn label(&self) -> String {
        let l = |ms: &[Matrix]| ms.iter().filter_map(|m| m.letter()).collect::<String>();
        format!("{}|{}", l(&self.relation), l(&self.subject))
    }

    fn matrices(&self, set: LoraSet) -> &[Matrix] {
        match set {
            LoraSet::Relation => &self.relation,
            LoraSet::Subject1 | LoraSet::Subject2 => &self.subject,
            LoraSet::Ffn => &Matrix::LINEAR,
        }
    }
}

/// The `⟨S_1, R, S_2⟩` identifiers a triplet was trained for.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub subject1: String,
    pub relation: String,
    pub subject2: String,
}

pub type AdapterSet<S> = BTreeMap<LoraBinding, LoraAdapter<S>>;

/// Relation LoRA triplet: Relation, Subject1, Subject2 and FFN adapter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletConfig<S> {
    pub pattern: Pattern,
    pub placement: Placement,
    pub rank: usize,
    sets: [AdapterSet<S>; 4],
}

fn index(set: LoraSet) -> usize {
    match set {
        LoraSet::Relation => 0,
        LoraSet::Subject1 => 1,
        LoraSet::Subject2 => 2,
        LoraSet::Ffn => 3,
    }
}

impl<S: Scalar> TripletConfig<S> {
    /// Fresh triplet: down factors ~ N(0, 1/r), up factors zero.
    pub fn init(cfg: &ModelConfig, placement: Placement, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if scale <= 0.0 {
            return Err(Error::Config("LoRA scale must be positive".into()));
        }
        let mut rng = Rng::seed_from_u64(seed);
        let std = (1.0 / rank as f64).sqrt();
        let mut sets: [AdapterSet<S>; 4] = Default::default();
        for set in LoraSet::ALL {
            for layer in 0..cfg.layers {
                for &matrix in placement.matrices(set) {
                    let (d_out, d_in) = matrix.dims(cfg);
                    if rank > d_in.min(d_out) {
                        return Err(Error::Config(format!(
                            "rank {rank} exceeds {}×{} for {}",
                            d_out,
                            d_in,
                            matrix.name()
                        )));
                    }
                    for branch in Branch::ALL {
                        let down = Tensor::gaussian(&[rank, d_in], 0.0, std, &mut rng);
                        let up = Tensor::zeros(&[d_out, rank]);
                        let adapter = LoraAdapter::new(down, up, S::c(scale))?;
                        sets[index(set)].insert(LoraBinding { layer, matrix, branch }, adapter);
                    }
                }
            }
        }
        Ok(Self { pattern: Pattern::default(), placement, rank, sets })
    }

    /// Assembles a triplet from explicit sets, checking placement rules.
    pub fn from_sets(pattern: Pattern, placement: Placement, rank: usize, sets: [AdapterSet<S>; 4]) -> Result<Self> {
        let t = Self { pattern, placement, rank, sets };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for set in LoraSet::ALL {
            let allowed = self.placement.matrices(set);
            for (b, a) in self.set(set) {
                if !allowed.contains(&b.matrix) {
                    return Err(Error::Binding(format!("{} adapter bound to {b}", set.name())));
                }
                if a.rank() != self.rank {
                    return Err(Error::Binding(format!("{} adapter at {b} has rank {}", set.name(), a.rank())));
                }
            }
        }
        Ok(())
    }

    pub fn set(&self, set: LoraSet) -> &AdapterSet<S> {
        &self.sets[index(set)]
    }

    pub fn set_mut(&mut self, set: LoraSet) -> &mut AdapterSet<S> {
        &mut self.sets[index(set)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (LoraSet, &LoraBinding, &LoraAdapter<S>)> {
        LoraSet::ALL.into_iter().flat_map(move |s| self.set(s).iter().map(move |(b, a)| (s, b, a)))
    }

    pub fn adapter_count(&self) -> usize {
        self.sets.iter().map(BTreeMap::len).sum()
    }

    /// Checks every binding refers to a layer of `cfg` with matching widths.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        for (set, b, a) in self.iter() {
            if b.layer >= cfg.layers {
                return Err(Error::Binding(format!("{} adapter bound to {b}, model has {} layers", set.name(), cfg.layers)));
            }
            let (d_out, d_in) = b.matrix.dims(cfg);
            if a.d_in() != d_in || a.d_out() != d_out {
                return Err(Error::Binding(format!(
                    "{} adapter at {b} is {}→{}, weight is {d_in}→{d_out}",
                    set.name(),
                    a.d_in(),
                    a.d_out()
                )));
            }
        }
        Ok(())
    }

    /// The adapters used at sampling time: Subject sets removed.
    pub fn inference_view(&self) -> Self {
        let mut view = self.clone();
        view.set_mut(LoraSet::Subject1).clear();
        view.set_mut(LoraSet::Subject2).clear();
        view
    }

    /// Copy with the given sets' up factors zeroed.
    pub fn with_zeroed(&self, sets: &[LoraSet]) -> Self {
        let mut out = self.clone();
        for &s in sets {
            for a in out.set_mut(s).values_mut() {
                a.up = Tensor::zeros(a.up.shape());
            }
        }
        out
    }

    /// Places every adapter factor into `graph`, as trainable leaves for the
    /// sets in `trainable` and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: &[LoraSet]) -> BoundTriplet<S> {
        let mut adapters = BTreeMap::new();
        for (set, b, a) in self.iter() {
            let (down, up) = if trainable.contains(&set) {
                (graph.param(a.down.clone()), graph.param(a.up.clone()))
            } else {
                (graph.constant(a.down.clone()), graph.constant(a.up.clone()))
            };
            adapters.entry(*b).or_insert_with(Vec::new).push(BoundAdapter { set, down, up, scale: a.scale });
        }
        BoundTriplet { adapters }
    }
}

/// Adapter factors living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter<S> {
    pub set: LoraSet,
    pub down: Var,
    pub up: Var,
    pub scale: S,
}

#[derive(Clone, Debug, Default)]
pub struct BoundTriplet<S> {
    adapters: BTreeMap<LoraBinding, Vec<BoundAdapter<S>>>,
}

impl<S: Scalar> BoundTriplet<S> {
    pub fn at(&self, binding: &LoraBinding) -> &[BoundAdapter<S>] {
        self.adapters.get(binding).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LoraBinding, &BoundAdapter<S>)> {
        self.adapters.iter().flat_map(|(b, v)| v.iter().map(move |a| (b, a)))
    }
}

/// Which adapter group trains on a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    Relation,
    Subject1,
    Subject2,
}

impl Choice {
    pub const ALL: [Choice; 3] = [Choice::Relation, Choice::Subject1, Choice::Subject2];

    pub fn name(self) -> &'static str {
        match self {
            Choice::Relation => "relation",
            Choice::Subject1 => "subject1",
            Choice::Subject2 => "subject2",
        }
    }
}

/// Mask a step's reconstruction loss is amplified on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    R,
    S1,
    S2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub choice: Choice,
    pub trainable: Vec<LoraSet>,
    pub mask_kind: MaskKind,
}

impl Selection {
    pub fn for_choice(choice: Choice) -> Self {
        use LoraSet::*;
        let (trainable, mask_kind) = match choice {
            // both Subject sets train alongside Relation to absorb appearance
            Choice::Relation => (vec![Relation, Subject1, Subject2, Ffn], MaskKind::R),
            Choice::Subject1 => (vec![Subject1, Ffn], MaskKind::S1),
            Choice::Subject2 => (vec![Subject2, Ffn], MaskKind::S2),
        };
        Self { choice, trainable, mask_kind }
    }
}

/// Uniform draw over Relation, Subject1 and Subject2.
pub fn select_active(rng: &mut Rng) -> Selection {
    Selection::for_choice(Choice::ALL[rng.random_range(0..3)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ModelConfig {
        ModelConfig { layers: 2, d_model: 16, heads: 2, ..Default::default() }
    }

    #[test]
    fn init_is_noop_and_deterministic() {
        let a = TripletConfig::<f64>::init(&small(), Placement::default(), 4, 1.0, 3).unwrap();
        let b = TripletConfig::<f64>::init(&small(), Placement::default(), 4, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|(_, _, ad)| ad.is_noop()));
        // 2 layers × 2 branches × (2 relation + 1 + 1 + 3 ffn)
        assert_eq!(a.adapter_count(), 2 * 2 * 7);
        a.check_against(&small()).unwrap();
    }

    #[test]
    fn default_rank_matches_training_default() {
        let t = TripletConfig::<f64>::init(&ModelConfig::default(), Placement::default(), 16, 1.0, 0).unwrap();
        assert_eq!(t.rank, crate::config::TrainConfig::default().rank);
    }

    #[test]
    fn rank_too_large() {
        assert!(matches!(
            TripletConfig::<f64>::init(&small(), Placement::default(), 17, 1.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn placement_parsing() {
        for p in Placement::PRESETS {
            assert_eq!(Placement::parse(p).unwrap().label(), p);
        }
        assert!(Placement::parse("QK|K").is_err());
        assert!(Placement::parse("QK").is_err());
        assert!(Placement::parse("QX|V").is_err());
        let p = Placement::parse("Q, K|V").unwrap();
        assert_eq!(p, Placement::default());
    }

    #[test]
    fn sets_touch_only_their_matrices() {
        let t = TripletConfig::<f64>::init(&small(), Placement::default(), 2, 1.0, 0).unwrap();
        assert!(t.set(LoraSet::Relation).keys().all(|b| matches!(b.matrix, Matrix::Q | Matrix::K)));
        assert!(t.set(LoraSet::Subject1).keys().all(|b| b.matrix == Matrix::V));
        assert!(t.set(LoraSet::Ffn).keys().all(|b| Matrix::LINEAR.contains(&b.matrix)));
        let view = t.inference_view();
        assert!(view.iter().all(|(_, b, _)| b.matrix != Matrix::V));
        assert_eq!(view.inference_view(), view);
    }

    #[test]
    fn apply_adapter_cases() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let base = apply_adapter(&w, &x, &[]).unwrap();
        assert_eq!(base.data(), &[-1.0, -1.0]);
        let zero = LoraAdapter::new(Tensor::ones(&[1, 2]), Tensor::zeros(&[2, 1]), 1.0).unwrap();
        assert_eq!(apply_adapter(&w, &x, &[&zero]).unwrap(), base);
        // down = [2, 1], up = [1, 3]ᵀ, scale 0.5: down·x = 1, delta = 0.5·[1, 3]
        let a = LoraAdapter::new(
            Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap(),
            0.5,
        )
        .unwrap();
        assert_eq!(apply_adapter(&w, &x, &[&a]).unwrap().data(), &[-0.5, 0.5]);
        let bad = LoraAdapter::new(Tensor::ones(&[1, 3]), Tensor::zeros(&[2, 1]), 1.0).unwrap();
        assert!(matches!(apply_adapter(&w, &x, &[&bad]), Err(Error::Binding(_))));
    }

    #[test]
    fn selection_contract() {
        let s = Selection::for_choice(Choice::Relation);
        assert_eq!(s.mask_kind, MaskKind::R);
        assert_eq!(s.trainable.len(), 4);
        let s = Selection::for_choice(Choice::Subject1);
        assert_eq!(s.trainable, vec![LoraSet::Subject1, LoraSet::Ffn]);
        assert_eq!(s.mask_kind, MaskKind::S1);
        let union: std::collections::BTreeSet<_> =
            Choice::ALL.iter().flat_map(|&c| Selection::for_choice(c).trainable).collect();
        assert_eq!(union.len(), 4);
    }

    #[test]
    fn selection_frequencies() {
        let mut rng = Rng::seed_from_u64(2024);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let c = select_active(&mut rng).choice;
            counts[Choice::ALL.iter().position(|&x| x == c).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((0.30..=0.37).contains(&f), "{counts:?}");
        }
    }
}
