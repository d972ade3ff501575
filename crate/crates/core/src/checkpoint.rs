//! Training snapshots: base weights, adapters, optimizer moments, iteration
//! counter and a JSON echo of the configuration, in one tensor container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::container::{Container, Entry};
use crate::denoiser::{BaseWeights, Denoiser};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, Branch, LoraAdapter, LoraBinding, LoraSet, Matrix, Pattern, Placement, TripletConfig};
use crate::optim::{AdamW, AdapterKey, Slot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONFIG_ENTRY: &str = "__config__";
const KIND: &str = "rlt-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub base: BaseWeights<S>,
    pub triplet: TripletConfig<S>,
    pub optimizer: AdamW<S>,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Echo {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    pattern: Pattern,
    iteration: u64,
}

const MATRICES: [Matrix; 6] = [Matrix::Q, Matrix::K, Matrix::V, Matrix::FfnIn, Matrix::FfnOut, Matrix::AttnOut];

fn adapter_prefix(set: LoraSet, b: &LoraBinding) -> String {
    format!("{}/{}/layer{}/{}", set.name(), b.branch.name(), b.layer, b.matrix.name())
}

fn parse_prefix(s: &str) -> Option<AdapterKey> {
    let mut p = s.split('/');
    let s = p.next()?;
    let set = LoraSet::ALL.into_iter().find(|x| x.name() == s)?;
    let b = p.next()?;
    let branch = Branch::ALL.into_iter().find(|x| x.name() == b)?;
    let layer = p.next()?.strip_prefix("layer")?.parse().ok()?;
    let m = p.next()?;
    let matrix = MATRICES.into_iter().find(|x| x.name() == m)?;
    p.next().is_none().then_some((set, LoraBinding { layer, matrix, branch }))
}

impl<S: Scalar> Checkpoint<S> {
    /// A checkpoint at iteration 0 with fresh adapters.
    pub fn init(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let base = BaseWeights::init(&model)?;
        let triplet = TripletConfig::init(&model, Placement::parse(&train.placement)?, train.rank, 1.0, train.seed)?;
        Ok(Self { model, train, base, triplet, optimizer: AdamW::new(), iteration: 0 })
    }

    pub fn denoiser(&self) -> Result<Denoiser<S>> {
        Denoiser::with_weights(self.model.clone(), self.base.clone())
    }

    pub fn to_container(&self) -> Container<S> {
        let mut c = Container::new();
        let echo = Echo {
            kind: KIND.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            pattern: self.triplet.pattern.clone(),
            iteration: self.iteration,
        };
        c.push_blob(CONFIG_ENTRY, serde_json::to_vec(&echo).expect("config serializes"));
        for (name, t) in self.base.named() {
            c.push_tensor(name, t.clone());
        }
        for (set, b, a) in self.triplet.iter() {
            let p = adapter_prefix(set, b);
            c.push_tensor(format!("lora/{p}/down"), a.down.clone());
            c.push_tensor(format!("lora/{p}/up"), a.up.clone());
        }
        for ((set, b), slot) in self.optimizer.slots() {
            let p = adapter_prefix(*set, b);
            c.push_tensor(format!("adam/step/{p}"), Tensor::scalar(S::c(slot.step as f64)));
            c.push_tensor(format!("adam/m/{p}/down"), slot.m_down.clone());
            c.push_tensor(format!("adam/v/{p}/down"), slot.v_down.clone());
            c.push_tensor(format!("adam/m/{p}/up"), slot.m_up.clone());
            c.push_tensor(format!("adam/v/{p}/up"), slot.v_up.clone());
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Loads with the model configuration echoed in the file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, None)
    }

    /// Loads against an expected model configuration; the first tensor whose
    /// shape disagrees is named in the error.
    pub fn load_for(path: &Path, model: &ModelConfig) -> Result<Self> {
        Self::from_container(Container::read(path)?, Some(model))
    }

    pub fn from_container(c: Container<S>, expected: Option<&ModelConfig>) -> Result<Self> {
        let blob = c.blob(CONFIG_ENTRY).ok_or_else(|| Error::Format(format!("checkpoint lacks `{CONFIG_ENTRY}`")))?;
        let echo: Echo = serde_json::from_slice(blob).map_err(|e| Error::Format(format!("bad `{CONFIG_ENTRY}`: {e}")))?;
        if echo.kind != KIND {
            return Err(Error::Format(format!("container holds `{}`, not a checkpoint", echo.kind)));
        }
        let model = expected.cloned().unwrap_or(echo.model);
        let train = echo.train;
        train.validate()?;

        let mut base = BTreeMap::new();
        let mut down = BTreeMap::new();
        let mut up = BTreeMap::new();
        let mut steps = BTreeMap::new();
        let mut moments: BTreeMap<(AdapterKey, &'static str), Tensor<S>> = BTreeMap::new();
        for (name, entry) in c.entries() {
            let Entry::Tensor(t) = entry else {
                if name == CONFIG_ENTRY {
                    continue;
                }
                return Err(Error::Format(format!("unexpected byte entry `{name}`")));
            };
            let unknown = || Error::Format(format!("unknown checkpoint entry `{name}`"));
            if name.starts_with("base/") {
                base.insert(name.clone(), t.clone());
            } else if let Some(rest) = name.strip_prefix("lora/") {
                let (p, which) = rest.rsplit_once('/').ok_or_else(unknown)?;
                let key = parse_prefix(p).ok_or_else(unknown)?;
                match which {
                    "down" => down.insert(key, t.clone()),
                    "up" => up.insert(key, t.clone()),
                    _ => return Err(unknown()),
                };
            } else if let Some(p) = name.strip_prefix("adam/step/") {
                steps.insert(parse_prefix(p).ok_or_else(unknown)?, t.item().f64() as u64);
            } else if let Some(rest) = name.strip_prefix("adam/") {
                let (kind, rest) = rest.split_once('/').ok_or_else(unknown)?;
                let (p, which) = rest.rsplit_once('/').ok_or_else(unknown)?;
                let key = parse_prefix(p).ok_or_else(unknown)?;
                let tag = match (kind, which) {
                    ("m", "down") => "m_down",
                    ("v", "down") => "v_down",
                    ("m", "up") => "m_up",
                    ("v", "up") => "v_up",
                    _ => return Err(unknown()),
                };
                moments.insert((key, tag), t.clone());
            } else {
                return Err(unknown());
            }
        }

        let base = BaseWeights::from_named(&model, &base)?;
        let scale = S::one();
        let mut sets: [AdapterSet<S>; 4] = Default::default();
        for (key, d) in down {
            let u = up.remove(&key).ok_or_else(|| Error::Format(format!("adapter {} lacks its up factor", adapter_prefix(key.0, &key.1))))?;
            let slot = LoraSet::ALL.iter().position(|s| *s == key.0).expect("known set");
            sets[slot].insert(key.1, LoraAdapter::new(d, u, scale)?);
        }
        if let Some((key, _)) = up.into_iter().next() {
            return Err(Error::Format(format!("adapter {} lacks its down factor", adapter_prefix(key.0, &key.1))));
        }
        let triplet = TripletConfig::from_sets(echo.pattern, Placement::parse(&train.placement)?, train.rank, sets)?;
        triplet.check_against(&model)?;

        let mut optimizer = AdamW::new();
        for (key, step) in steps {
            let mut take = |tag: &'static str| {
                moments.remove(&(key, tag)).ok_or_else(|| Error::Format(format!("missing {tag} moment for {}", adapter_prefix(key.0, &key.1))))
            };
            optimizer.insert(key, Slot { step, m_down: take("m_down")?, v_down: take("v_down")?, m_up: take("m_up")?, v_up: take("v_up")? });
        }
        if let Some(((key, tag), _)) = moments.into_iter().next() {
            return Err(Error::Format(format!("{tag} moment for {} has no step counter", adapter_prefix(key.0, &key.1))));
        }
        Ok(Self { model, train, base, triplet, optimizer, iteration: echo.iteration })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_round_trip() {
        let key = (LoraSet::Subject2, LoraBinding { layer: 3, matrix: Matrix::FfnOut, branch: Branch::Vision });
        let p = adapter_prefix(key.0, &key.1);
        assert_eq!(p, "subject2/vision/layer3/ffn_out");
        assert_eq!(parse_prefix(&p), Some(key));
        assert_eq!(parse_prefix("subject2/vision/layer3/ffn_out/extra"), None);
        for set in LoraSet::ALL {
            let key = (set, LoraBinding { layer: 0, matrix: Matrix::V, branch: Branch::Text });
            assert_eq!(parse_prefix(&adapter_prefix(key.0, &key.1)), Some(key));
        }
    }
}
