//! Feature and annotation data model.
//!
//! Image items carry `T x d_raw` patch tokens (projected to width `d` by the
//! model's trainable linear layer) and a global vector already at width `d`.
//! Text items carry `M x d` tokens and a `d`-wide global vector.

mod annotations;
mod format;
mod synth;

use std::collections::HashMap;

pub use annotations::{parse_annotations, read_annotations, write_annotations};
pub use format::{decode_store, encode_store, load_store, save_store, MAGIC, VERSION};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Result, SsnError};
use crate::numerics::{Scalar, Tensor};

/// Number of curated hard negatives attached to a triplet.
pub const SUBSET_SIZE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ReferenceImage,
    TargetImage,
    Text,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::ReferenceImage => 0,
            Role::TargetImage => 1,
            Role::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::ReferenceImage),
            1 => Some(Role::TargetImage),
            2 => Some(Role::Text),
            _ => None,
        }
    }

    pub fn is_image(self) -> bool {
        !matches!(self, Role::Text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One item's token sequence plus its global vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    pub item_id: u64,
    pub role: Role,
    pub global: Vec<f32>,
    pub tokens: Tensor<f32>,
}

impl TokenFeatures {
    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub reference_id: u64,
    pub text_id: u64,
    pub target_id: u64,
    pub subset_ids: Option<[u64; SUBSET_SIZE]>,
}

/// Items and triplet annotations for one split. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    d_raw: usize,
    d: usize,
    items: Vec<TokenFeatures>,
    index: HashMap<u64, usize>,
    triplets: Vec<Triplet>,
    split: Split,
}

impl FeatureStore {
    pub fn new(d_raw: usize, d: usize) -> Self {
        FeatureStore {
            d_raw,
            d,
            items: Vec::new(),
            index: HashMap::new(),
            triplets: Vec::new(),
            split: Split::Train,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn items(&self) -> &[TokenFeatures] {
        &self.items
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn get(&self, id: u64) -> Option<&TokenFeatures> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn item(&self, id: u64) -> Result<&TokenFeatures> {
        self.get(id)
            .ok_or_else(|| SsnError::Data(format!("unknown item id {id}")))
    }

    /// Gallery members: every image item, in insertion order.
    pub fn gallery_ids(&self) -> Vec<u64> {
        self.items
            .iter()
            .filter(|it| it.role == Role::TargetImage)
            .map(|it| it.item_id)
            .collect()
    }

    fn token_width(&self, role: Role) -> usize {
        if role.is_image() {
            self.d_raw
        } else {
            self.d
        }
    }

    pub fn insert(&mut self, item: TokenFeatures) -> Result<()> {
        if self.index.contains_key(&item.item_id) {
            return Err(SsnError::Data(format!("duplicate item id {}", item.item_id)));
        }
        if item.global.len() != self.d {
            return Err(SsnError::Data(format!(
                "item {}: global width {} != {}",
                item.item_id,
                item.global.len(),
                self.d
            )));
        }
        if item.tokens.rows() == 0 || item.tokens.cols() != self.token_width(item.role) {
            return Err(SsnError::Data(format!(
                "item {}: tokens {}x{} but role {:?} needs width {}",
                item.item_id,
                item.tokens.rows(),
                item.tokens.cols(),
                item.role,
                self.token_width(item.role)
            )));
        }
        if !item.tokens.is_finite() || item.global.iter().any(|v| !v.is_finite()) {
            return Err(SsnError::Data(format!("item {}: non-finite value", item.item_id)));
        }
        self.index.insert(item.item_id, self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn validate_triplet(&self, t: &Triplet) -> Result<()> {
        let check = |id: u64, want_image: bool, what: &str| -> Result<()> {
            let it = self.item(id)?;
            if it.role.is_image() != want_image {
                return Err(SsnError::Data(format!("{what} id {id} has role {:?}", it.role)));
            }
            Ok(())
        };
        check(t.reference_id, true, "reference")?;
        check(t.text_id, false, "text")?;
        check(t.target_id, true, "target")?;
        if let Some(subset) = &t.subset_ids {
            for (i, &id) in subset.iter().enumerate() {
                check(id, true, "subset")?;
                if id == t.reference_id || id == t.target_id || subset[..i].contains(&id) {
                    return Err(SsnError::Data(format!(
                        "subset of ({}, {}, {}) repeats id {id}",
                        t.reference_id, t.text_id, t.target_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn push_triplet(&mut self, t: Triplet) -> Result<()> {
        self.validate_triplet(&t)?;
        self.triplets.push(t);
        Ok(())
    }

    /// Same items, different annotations.
    pub fn with_triplets(&self, triplets: Vec<Triplet>, split: Split) -> Result<Self> {
        let mut out = FeatureStore {
            triplets: Vec::with_capacity(triplets.len()),
            split,
            ..self.clone()
        };
        for t in triplets {
            out.push_triplet(t)?;
        }
        Ok(out)
    }

    /// First `n_train` triplets as a train store, the rest as a test store.
    pub fn split_at(&self, n_train: usize) -> Result<(Self, Self)> {
        if n_train > self.triplets.len() {
            return Err(SsnError::Config(format!(
                "cannot take {n_train} training triplets from {}",
                self.triplets.len()
            )));
        }
        let (a, b) = self.triplets.split_at(n_train);
        Ok((
            self.with_triplets(a.to_vec(), Split::Train)?,
            self.with_triplets(b.to_vec(), Split::Test)?,
        ))
    }
}

/// Affine per-token map from `d_raw` to `d`: `tokens W + b`.
pub fn project_image_tokens<T: Scalar>(
    raw: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if raw.cols() != weight.rows() {
        return Err(SsnError::Data(format!(
            "raw token width {} does not match projection input {}",
            raw.cols(),
            weight.rows()
        )));
    }
    if bias.len() != weight.cols() {
        return Err(SsnError::Dimension("projection bias width".into()));
    }
    let mut out = raw.matmul(weight)?;
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Ok(out)
}
