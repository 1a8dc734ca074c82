//! Learner attentiveness engine.
//!
//! Frames are face-gated ([`facegate`]), classified by a four-branch network
//! into per-state intensity distributions ([`affectmodel`], built on
//! [`tensornet`]), collapsed into a scalar attentiveness index ([`attnindex`]),
//! and aggregated per lecture into alerts, reports and recommendations
//! ([`analytics`]).

pub mod affectmodel;
pub mod analytics;
pub mod attnindex;
pub mod datasetio;
pub mod facegate;
pub mod image;
pub mod par;
pub mod tensornet;
