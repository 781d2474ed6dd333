//! Latent-space radiance fields with mask-constrained diffusion editing.
//!
//! This crate trains a neural radiance field directly on 4-channel latent
//! feature maps, extracts prompt-aware edit masks from the difference between
//! conditional and unconditional denoiser predictions, and performs
//! mask-constrained DDIM editing with iterative dataset update. Denoiser
//! backends are pluggable, so the whole pipeline runs and is testable on a
//! laptop without any pretrained model.
//!
//! The companion guide under `book/` walks through every subsystem; its code
//! snippets are compiled and run as doctests of this crate (see the
//! `book_tests` module at the bottom of this file).

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod delta;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod field;
pub mod refine;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};

// Compile and run the guide's code snippets as doctests so the book can never
// drift from the library.
#[cfg(doctest)]
mod book_tests {
    macro_rules! book_chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    book_chapter!(introduction, "../../../book/src/introduction.md");
    book_chapter!(scenes, "../../../book/src/scenes.md");
    book_chapter!(fields, "../../../book/src/fields.md");
    book_chapter!(adapter, "../../../book/src/adapter.md");
    book_chapter!(cameras, "../../../book/src/cameras.md");
    book_chapter!(diffusion, "../../../book/src/diffusion.md");
    book_chapter!(masks, "../../../book/src/masks.md");
    book_chapter!(editing, "../../../book/src/editing.md");
}
