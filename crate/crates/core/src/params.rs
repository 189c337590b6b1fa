//! Named parameter storage, binding into autodiff leaves, and the partial
//! loading policies used when fine-tuning from a pre-trained checkpoint.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use mimq_tensor::init::trunc_normal;
use mimq_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal with [`INIT_STD`].
    Normal,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))` over a `[fan_in, fan_out]` shape.
    XavierUniform,
    Zeros,
    Ones,
    Const(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered map from hierarchical names (`encoder.stages.0...`) to values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh values for `specs`, drawn in list order.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Normal => trunc_normal(rng, n, INIT_STD),
                Init::XavierUniform => {
                    let fans: usize = s.shape.iter().take(2).sum();
                    let a = (6.0 / fans.max(1) as f64).sqrt() as f32;
                    (0..n).map(|_| rng.random_range(-a..=a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
            };
            store.insert(&s.name, s.shape.clone(), data);
        }
        store
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.to_string(), ParamEntry { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    /// Leaf tensors for one step. `trainable` controls gradient tracking.
    pub fn bind(&self, trainable: bool) -> Params {
        let map = self
            .entries
            .iter()
            .map(|(k, e)| {
                let t = if trainable {
                    Tensor::param(e.data.clone(), &e.shape)
                } else {
                    Tensor::from_vec(e.data.clone(), &e.shape)
                }
                .expect("stored shapes are consistent");
                (k.clone(), t)
            })
            .collect();
        Params { map }
    }

    /// Same names, shapes and bits.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Bound parameter tensors for one forward/backward pass.
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Which pre-trained parameters a fine-tuning run inherits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadPolicy {
    None,
    Backbone,
    BackboneFpn,
    Full,
}

impl LoadPolicy {
    pub const ALL: [LoadPolicy; 4] = [
        LoadPolicy::None,
        LoadPolicy::Backbone,
        LoadPolicy::BackboneFpn,
        LoadPolicy::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoadPolicy::None => "none",
            LoadPolicy::Backbone => "backbone",
            LoadPolicy::BackboneFpn => "backbone_fpn",
            LoadPolicy::Full => "full",
        }
    }

    /// Name prefixes copied from the checkpoint. `query.cls` seeds the
    /// fine-tuning queries and travels with every non-empty policy.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            LoadPolicy::None => &[],
            LoadPolicy::Backbone => &["encoder.", "query.cls"],
            LoadPolicy::BackboneFpn => &["encoder.", "query.cls", "fpn."],
            LoadPolicy::Full => &["encoder.", "query.cls", "fpn.", "decoder.", "query.mask_token"],
        }
    }

    pub fn selects(self, name: &str) -> bool {
        !name.starts_with("head.") && self.prefixes().iter().any(|p| name.starts_with(p))
    }
}

impl fmt::Display for LoadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoadPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown load policy `{s}`")))
    }
}

/// Copies every parameter of `target` selected by `policy` from `source`.
/// Fails without touching `target` if any selected name is missing from
/// `source` or has a different shape. Returns the copied names.
pub fn apply_policy(target: &mut ParamStore, source: &ParamStore, policy: LoadPolicy) -> Result<Vec<String>> {
    let selected: Vec<String> = target.names().filter(|n| policy.selects(n)).map(str::to_string).collect();
    let missing: Vec<String> = selected.iter().filter(|n| !source.contains(n)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::PolicyMissing {
            policy: policy.name().into(),
            missing,
        });
    }
    for name in &selected {
        let (want, got) = (&target.get(name).unwrap().shape, &source.get(name).unwrap().shape);
        if want != got {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: want.clone(),
                found: got.clone(),
            });
        }
    }
    for name in &selected {
        let data = source.get(name).unwrap().data.clone();
        target.get_mut(name).unwrap().data = data;
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(names: &[(&str, usize)]) -> ParamStore {
        let specs: Vec<ParamSpec> = names.iter().map(|(n, k)| ParamSpec::new(*n, &[*k], Init::Normal)).collect();
        ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn policies_nest() {
        for w in LoadPolicy::ALL.windows(2) {
            for p in w[0].prefixes() {
                assert!(w[1].prefixes().contains(p));
            }
            assert!(w[1].prefixes().len() > w[0].prefixes().len());
        }
        assert!(!LoadPolicy::Full.selects("head.semseg.cls.weight"));
        assert!(LoadPolicy::Backbone.selects("query.cls"));
        assert!(!LoadPolicy::Backbone.selects("decoder.norm.gamma"));
    }

    #[test]
    fn missing_names_leave_target_untouched() {
        let mut target = store(&[("encoder.a", 2), ("encoder.b", 2)]);
        let before = target.clone();
        let source = store(&[("encoder.a", 2)]);
        let err = apply_policy(&mut target, &source, LoadPolicy::Backbone).unwrap_err();
        assert!(matches!(err, Error::PolicyMissing { ref missing, .. } if missing == &["encoder.b".to_string()]));
        assert!(target.bit_equal(&before));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut target = store(&[("encoder.a", 2)]);
        let source = store(&[("encoder.a", 3)]);
        assert!(matches!(
            apply_policy(&mut target, &source, LoadPolicy::Full),
            Err(Error::ParamShape { .. })
        ));
    }

    #[test]
    fn init_is_deterministic_and_bind_tracks() {
        let a = store(&[("x", 5)]);
        let b = store(&[("x", 5)]);
        assert!(a.bit_equal(&b));
        let p = a.bind(true);
        assert!(p.get("x").unwrap().requires_grad());
        assert!(!a.bind(false).get("x").unwrap().requires_grad());
        assert!(matches!(p.get("y"), Err(Error::MissingParam(_))));
    }

    #[test]
    fn policy_parses() {
        for p in LoadPolicy::ALL {
            assert_eq!(p.name().parse::<LoadPolicy>().unwrap(), p);
        }
        assert!("most".parse::<LoadPolicy>().is_err());
    }
}
