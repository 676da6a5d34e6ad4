// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod compose;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod loss;
pub mod motion;
pub mod pointcloud;
pub mod raster;
pub mod render;
pub mod surfel;
pub mod train;
pub mod view;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/cameras.md")]
    mod cameras {}
    #[doc = include_str!("../../../book/src/surfels.md")]
    mod surfels {}
    #[doc = include_str!("../../../book/src/views.md")]
    mod views {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/composition.md")]
    mod composition {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
