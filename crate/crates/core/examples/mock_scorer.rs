//! Scores sequences through the HTTP reward protocol against a local mock,
//! including the failure modes a client must handle.

use std::time::Duration;

use tcrgpt::rl::{MockBehavior, MockServer, Peptide, RemoteScorer, RewardScorer};
use tcrgpt::seqcore::TcrSequence;

fn main() -> tcrgpt::Result<()> {
    let peptide = Peptide::new("GILGFVFTL")?;
    let tcrs = vec![TcrSequence::new("CASSGFVSF")?, TcrSequence::new("CASSLAPGATNEKLFF")?];

    let behaviors = ["motif:3", "constant:0.25", "wrong-length", "out-of-range", "status:503", "delay:400:constant:1"];
    for b in behaviors {
        let server = MockServer::start("127.0.0.1:0", MockBehavior::parse(b)?)?;
        let scorer = RemoteScorer {
            timeout: Duration::from_millis(200),
            retries: 1,
            backoff_base: Duration::from_millis(10),
            ..RemoteScorer::new(server.endpoint())
        };
        match scorer.score(&peptide, &tcrs) {
            Ok(s) => println!("{b:<22} ok {s:?}"),
            Err(e) => println!("{b:<22} {}: {e}", e.category()),
        }
    }
    Ok(())
}
