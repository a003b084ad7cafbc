//! Surface-constrained tracking of a varying number of current dipoles in
//! MEG data.

pub mod dynamics;
pub mod forward;
pub mod mesh;
pub mod assign;
pub mod mne;
pub mod filter;
pub mod eval;
