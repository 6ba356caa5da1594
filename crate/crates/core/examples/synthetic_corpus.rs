//! Generates a small corpus and prints one user's token stream.

use padrec::datagen::{Dataset, GenConfig};
use padrec::tokenspace::parse_response;

fn main() -> padrec::Result<()> {
    let ds = Dataset::generate(&GenConfig { n_items: 100, n_users: 50, ..GenConfig::default() })?;
    println!("vocabulary of {} tokens, {} items in {} clusters", ds.vocab.size(), ds.catalog.len(), ds.catalog.n_clusters());
    println!("splits: {} train, {} valid, {} test", ds.splits.train.len(), ds.splits.valid.len(), ds.splits.test.len());

    let user = &ds.users[0];
    let s = ds.stream(0);
    println!("user 0: {} history items, target {:?}", user.history.len(), user.target);
    println!("stream of {} tokens, response starts at {}", s.len(), s.t0);
    let ids: Vec<u32> = s.response().iter().map(|t| t.0).collect();
    println!("response tokens: {ids:?}");

    let parsed = parse_response(s.response(), &ds.vocab);
    let back: Vec<usize> = parsed.items.iter().filter_map(|t| ds.catalog.lookup(t)).collect();
    println!("parsed back: {back:?} (well formed: {})", parsed.well_formed);
    Ok(())
}
