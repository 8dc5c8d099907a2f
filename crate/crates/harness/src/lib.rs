//! Local HTTP/1.1 file server with token-bucket throttling, used to test the
//! downloader end to end without a network.

mod bucket;
mod fixtures;
mod server;

pub use bucket::TokenBucket;
pub use fixtures::{generate_fixture_set, write_random_file, FixtureFile};
pub use server::{serve, ServerHandle, ServerOptions, ServerStats, ThrottleConfig, ThrottleError};
