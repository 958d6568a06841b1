//! Fixtures for the benchmarks.

use twinspect::calibration::{CalibrationModel, PairTokens, BUILTIN_EMBED_DIM};
use twinspect::features::BUILTIN_DIM;
use twinspect::scene::{DatasetConfig, Generator, ImagePair, Split};

/// First test pair of the default dataset (504×504) that carries a defect,
/// plus its tokens and a freshly initialized model.
pub struct Fixture {
    pub pair: ImagePair,
    pub tokens: PairTokens,
    pub model: CalibrationModel,
}

pub fn fixture() -> Fixture {
    let cfg = DatasetConfig::default();
    let gen = Generator::new(&cfg).expect("default config is valid");
    let plan = gen
        .plans()
        .iter()
        .find(|p| p.split == Split::Test && p.kind.is_some())
        .expect("default test split has defects")
        .clone();
    let pair = gen.pair(&plan).expect("pair generates");
    let tokens = PairTokens::from_images(
        pair.id(),
        &pair.real,
        &pair.render,
        &pair.mask_w,
        true,
        twinspect::features::DEFAULT_PATCH,
        twinspect::features::DEFAULT_MASK_THRESHOLD,
    )
    .expect("default size tiles into patches");
    let model = CalibrationModel::init(BUILTIN_DIM, BUILTIN_EMBED_DIM, true, true, 0).expect("valid dims");
    Fixture { pair, tokens, model }
}
