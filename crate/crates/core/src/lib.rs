//! Digital twins of partially printed wireframes from sparse grayscale
//! views.
//!
//! Printed struts are Bézier curves. A neural deformation field displaces
//! their samples, the displaced samples are refit into curves, Gaussian
//! kernels anchored along those curves are splatted into each view, and the
//! field is optimized so that the renders match the captured images. The
//! recovered field then bends the unprinted struts onto the deformed
//! structure.

pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod optimize;
pub mod splat;
pub mod synth;
pub mod wireframe;

pub use error::{Error, Result};
pub use geometry::{BezierCurve, Point3};
