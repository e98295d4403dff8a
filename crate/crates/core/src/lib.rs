pub mod annotate;
pub mod bevrender;
pub mod config;
pub mod geometry;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod rollout;
pub mod scene;
pub mod tokenizer;
pub mod train;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    pub mod scenes {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    pub mod tokens {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/annotation.md")]
    pub mod annotation {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    pub mod finetuning {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
