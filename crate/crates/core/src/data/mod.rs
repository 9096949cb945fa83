//! Corpus ingestion, cleaning, MCAR sparsification, windowing, synthetic
//! suites, and the encoder visualization dataset.

mod clean;
mod corpus;
mod store;
mod synth;
mod viz;
mod windows;

pub use clean::{
    check_rate, clean_series, fill_short_gaps, lagrange_fill, mad_smooth, mcar_sparsify, series_rng, spline_fill,
    CleanConfig, NaturalSpline,
};
pub use corpus::{load_csv, parse_csv, RawSeries};
pub use store::{
    prepare_corpus, prepare_synthetic, read_dataset, sparsify, write_dataset, Dataset, Meta, PrepareConfig,
    Source, SplitCounts, DATASET_VERSION, SPLIT_NAMES,
};
pub use synth::{synth_suite, SynthConfig, SynthKind, PERIODS};
pub use viz::{
    baseline, baseline_encoders, conv_encode, delta_encode, raster_csv, raster_svg, sedse_encode, synth_viz_series, write_viz,
    Sampled, SpikeTrain,
    VizConfig, VizSeries,
};
pub use windows::{make_windows, split_windows, MaskedSeries, SplitFractions, Splits, Window, WindowConfig};
