//! Proxy FID between shape images, a second draw of shapes, and noise.

use tecswin::metrics::{image_fid, RandomConvFeatures};
use tecswin::shapes::ShapesDataset;
use tecswin::tensor::{Rng, Tensor};

fn main() -> tecswin::Result<()> {
    let (real, _) = ShapesDataset::new(16, 0).batch(128)?;
    let (other, _) = ShapesDataset::new(16, 1).batch(128)?;
    let noise = Tensor::rand_uniform(&[128, 16, 16, 3], -1.0, 1.0, &mut Rng::new(2));
    let ex = RandomConvFeatures::new(0, 32);
    println!("shapes vs shapes {:.3}", image_fid(&real, &other, &ex)?);
    println!("shapes vs noise  {:.3}", image_fid(&real, &noise, &ex)?);
    Ok(())
}
