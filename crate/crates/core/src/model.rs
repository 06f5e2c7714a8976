//! A fitted model: embedding, global parameters and user profiles.

use std::collections::BTreeMap;

use crate::domain::{Embedding, GlobalParams, ModelKind, UserProfile};

/// Parameters used to score triples for one user (or the identity user).
#[derive(Debug, Clone, Copy)]
pub struct KernelView<'a> {
    /// `None` means unit scaling.
    pub scaling: Option<&'a [f64]>,
    pub params: GlobalParams,
}

impl<'a> KernelView<'a> {
    pub fn identity(params: GlobalParams) -> Self {
        Self { scaling: None, params }
    }

    pub fn for_profile(profile: &'a UserProfile, lambda: f64) -> Self {
        Self {
            scaling: Some(&profile.scaling),
            params: GlobalParams { lambda, mu: profile.mu, d_neither_sq: profile.d_neither_sq },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub embedding: Embedding,
    /// For personalized models these are the defaults handed to unseen users.
    pub params: GlobalParams,
    pub profiles: BTreeMap<String, UserProfile>,
}

impl Model {
    pub fn new(kind: ModelKind, embedding: Embedding, params: GlobalParams) -> Self {
        Self { kind, embedding, params, profiles: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    /// The view a given user's answers are scored with. Non-personalized
    /// models ignore the user; unknown users get the identity profile.
    pub fn view_for(&self, user_id: &str) -> KernelView<'_> {
        match (self.kind, self.profiles.get(user_id)) {
            (ModelKind::Personalized, Some(p)) => KernelView::for_profile(p, self.params.lambda),
            _ => KernelView::identity(self.params),
        }
    }

    pub fn identity_view(&self) -> KernelView<'_> {
        KernelView::identity(self.params)
    }

    /// Profile used for a user, materializing the identity user if unknown.
    pub fn profile_or_identity(&self, user_id: &str) -> UserProfile {
        self.profiles.get(user_id).cloned().unwrap_or_else(|| {
            UserProfile::identity(user_id, self.dim(), self.params.mu, self.params.d_neither_sq)
        })
    }
}
