//! Named parameters with trainability flags and owner tags.

use std::collections::HashMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::ParamId;
use crate::tensor::{Real, Tensor};

/// Which part of the model owns a parameter.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Frozen native text encoder.
    TextEncoder,
    /// Frozen vision encoder.
    VisionEncoder,
    /// Shared non-native embedding table and its input projection.
    NonNativeEmbedding,
    /// Acquirer stack of one language.
    Acquirer(String),
    /// Output projections into the joint space.
    Heads,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::TextEncoder => f.write_str("text"),
            Component::VisionEncoder => f.write_str("vision"),
            Component::NonNativeEmbedding => f.write_str("nonnative_emb"),
            Component::Acquirer(lang) => write!(f, "acquirer:{lang}"),
            Component::Heads => f.write_str("heads"),
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "text" => Component::TextEncoder,
            "vision" => Component::VisionEncoder,
            "nonnative_emb" => Component::NonNativeEmbedding,
            "heads" => Component::Heads,
            _ => match s.strip_prefix("acquirer:") {
                Some(lang) if !lang.is_empty() => Component::Acquirer(lang.to_string()),
                _ => return Err(Error::Data(format!("unknown component tag {s:?}"))),
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub component: Component,
    /// Embedding tables get sparse row-wise optimizer updates.
    pub embedding: bool,
    /// When set, only these rows of a trainable parameter may change.
    pub row_mask: Option<Vec<bool>>,
}

impl<T: Real> Param<T> {
    /// Whether row `r` may be updated.
    pub fn row_trainable(&self, r: usize) -> bool {
        self.trainable && self.row_mask.as_ref().is_none_or(|m| m[r])
    }
}

/// Picks parameters for [`ParamRegistry::set_trainable`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    Component(Component),
    /// Every acquirer stack.
    AllAcquirers,
    Name(String),
    /// A subset of rows of one embedding table.
    EmbeddingRows {
        name: String,
        rows: Vec<usize>,
    },
}

#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Param<T>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Contract(format!(
                "parameter {:?} registered twice",
                param.name
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        component: Component,
        embedding: bool,
    ) -> Result<ParamId> {
        self.insert(Param {
            name: name.into(),
            value,
            trainable: true,
            component,
            embedding,
            row_mask: None,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    fn matches(p: &Param<T>, sel: &Selector) -> bool {
        match sel {
            Selector::Component(c) => &p.component == c,
            Selector::AllAcquirers => matches!(p.component, Component::Acquirer(_)),
            Selector::Name(n) | Selector::EmbeddingRows { name: n, .. } => &p.name == n,
        }
    }

    /// Toggles trainability. Values are never touched. Returns how many
    /// parameters were affected.
    pub fn set_trainable(&mut self, selectors: &[Selector], flag: bool) -> Result<usize> {
        let mut hits = 0;
        for sel in selectors {
            let mut sel_hits = 0;
            for p in &mut self.params {
                if !Self::matches(p, sel) {
                    continue;
                }
                sel_hits += 1;
                match sel {
                    Selector::EmbeddingRows { rows, .. } => {
                        let n = p.value.rows();
                        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                            return Err(Error::EmptySelection(format!(
                                "row {bad} outside {:?} with {n} rows",
                                p.name
                            )));
                        }
                        if flag {
                            let mask = match (&p.row_mask, p.trainable) {
                                (Some(m), true) => m.clone(),
                                _ => vec![false; n],
                            };
                            let mut mask = mask;
                            for &r in rows {
                                mask[r] = true;
                            }
                            p.row_mask = Some(mask);
                            p.trainable = true;
                        } else if p.trainable {
                            let mut mask = p.row_mask.clone().unwrap_or_else(|| vec![true; n]);
                            for &r in rows {
                                mask[r] = false;
                            }
                            p.trainable = mask.iter().any(|&m| m);
                            p.row_mask = Some(mask);
                        }
                    }
                    _ => {
                        p.trainable = flag;
                        p.row_mask = None;
                    }
                }
            }
            if sel_hits == 0 {
                return Err(Error::EmptySelection(format!("{sel:?}")));
            }
            hits += sel_hits;
        }
        Ok(hits)
    }

    /// Freezes everything.
    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
            p.row_mask = None;
        }
    }

    /// SHA-256 over names, shapes and raw value bytes of the selected
    /// parameters, in registry order.
    pub fn digest(&self, filter: impl Fn(&Param<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn component_digest(&self, component: &Component) -> String {
        self.digest(|p| &p.component == component)
    }

    pub fn count(&self, filter: impl Fn(&Param<T>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| filter(p))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn convert<U: Real>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.convert(),
                    trainable: p.trainable,
                    component: p.component.clone(),
                    embedding: p.embedding,
                    row_mask: p.row_mask.clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> ParamRegistry<f32> {
        let mut r = ParamRegistry::new();
        r.add(
            "t.w",
            Tensor::full(&[2, 2], 1.0),
            Component::TextEncoder,
            false,
        )
        .unwrap();
        r.add(
            "emb",
            Tensor::full(&[4, 2], 2.0),
            Component::NonNativeEmbedding,
            true,
        )
        .unwrap();
        r.add(
            "a.de.w",
            Tensor::zeros(&[2, 2]),
            Component::Acquirer("de".into()),
            false,
        )
        .unwrap();
        r.add(
            "a.fr.w",
            Tensor::zeros(&[2, 2]),
            Component::Acquirer("fr".into()),
            false,
        )
        .unwrap();
        r
    }

    #[test]
    fn toggling_keeps_values() {
        let mut r = registry();
        let before = r.digest(|_| true);
        r.set_trainable(&[Selector::Component(Component::TextEncoder)], false)
            .unwrap();
        assert!(!r.by_name("t.w").unwrap().trainable);
        assert_eq!(before, r.digest(|_| true));
    }

    #[test]
    fn language_selector_hits_only_that_stack() {
        let mut r = registry();
        let n = r
            .set_trainable(
                &[Selector::Component(Component::Acquirer("de".into()))],
                false,
            )
            .unwrap();
        assert_eq!(n, 1);
        assert!(r.by_name("a.fr.w").unwrap().trainable);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let mut r = registry();
        let err = r.set_trainable(
            &[Selector::Component(Component::Acquirer("xx".into()))],
            true,
        );
        assert!(matches!(err, Err(Error::EmptySelection(_))));
    }

    #[test]
    fn row_subset_mask() {
        let mut r = registry();
        r.set_trainable(&[Selector::Name("emb".into())], false)
            .unwrap();
        r.set_trainable(
            &[Selector::EmbeddingRows {
                name: "emb".into(),
                rows: vec![1, 3],
            }],
            true,
        )
        .unwrap();
        let p = r.by_name("emb").unwrap();
        assert_eq!(
            (0..4).map(|i| p.row_trainable(i)).collect::<Vec<_>>(),
            [false, true, false, true]
        );
    }

    #[test]
    fn component_tags_roundtrip() {
        for c in [
            Component::TextEncoder,
            Component::Acquirer("de".into()),
            Component::Heads,
        ] {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
    }
}
