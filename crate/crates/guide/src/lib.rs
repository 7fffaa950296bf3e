//! The chapters of `book/src` as module docs, so `cargo test` compiles and
//! runs every code sample in the book.

macro_rules! chapters {
    ($($module:ident => $file:literal),* $(,)?) => {
        $(
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub mod $module {}
        )*

        /// Chapter files included above, in book order.
        pub const CHAPTERS: &[&str] = &[$($file),*];
    };
}

chapters! {
    introduction => "introduction.md",
    poses => "poses.md",
    histograms => "histograms.md",
    radiance_field => "radiance-field.md",
    pose_regression => "pose-regression.md",
    random_views => "random-views.md",
    direct_matching => "direct-matching.md",
    experiments => "experiments.md",
}
