//! ECG tokens, retrieval and prompt assembly together, including a round
//! trip through the HTTP mock backend.

use ecgrag::dsp::preprocess;
use ecgrag::ecg_bpe::{decode, encode_record, quantize, train_bpe};
use ecgrag::genclient::{EndpointConfig, GenRequest, Generator, HttpGenerator, MockMode, MockServer, MockServerOptions};
use ecgrag::promptkit::{
    assemble, fit, render_and_label, render_text, ByteTokenizer, Conversation, RagOptions, RenderOptions, Special,
    TokenizerAdapter, Turn, DEFAULT_SYSTEM_PROMPT, IGNORE_INDEX,
};
use ecgrag::ragdb::{BuildParams, QueryMode, RagDatabase};
use ecgrag::synth::{synth_record, REPORT_QUESTION};

/// Supervised positions found by scanning the token stream: the content of
/// each assistant message through its end-of-turn token.
fn scan_supervised(ids: &[u32]) -> Vec<usize> {
    let tok = ByteTokenizer;
    let (start, end, eot) = (tok.special(Special::StartHeader), tok.special(Special::EndHeader), tok.special(Special::EndOfTurn));
    let mut out = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        if ids[i] == start {
            let close = i + ids[i..].iter().position(|t| *t == end).unwrap();
            let role: Vec<u8> = ids[i + 1..close].iter().map(|t| *t as u8).collect();
            i = close + 3; // end header plus the two newlines
            if role == b"assistant" {
                while i < ids.len() {
                    out.push(i);
                    i += 1;
                    if ids[i - 1] == eot {
                        break;
                    }
                }
            }
        } else {
            i += 1;
        }
    }
    out
}

#[test]
fn bpe_tokens_in_labelled_prompts() {
    let recs: Vec<_> = (0..6).map(|i| synth_record(i, 2)).collect();
    let segments: Vec<_> = recs.iter().flat_map(|r| preprocess(&r.record).unwrap()).collect();
    let corpus: Vec<Vec<u32>> = segments.iter().map(|s| quantize(&s.to_record(), 26)).collect();
    let vocab = train_bpe(&corpus, 26, 200).unwrap();
    let tokens = encode_record(&segments[0].to_record(), &vocab).unwrap();
    assert_eq!(decode(&tokens.ids, &vocab).unwrap(), corpus[0]);

    let items: Vec<_> = segments.iter().map(|s| (s.clone(), recs[s.record_id[3..].parse::<usize>().unwrap()].report.clone())).collect();
    let db = RagDatabase::build(&items, BuildParams::default()).unwrap();
    let hits = db.query_segments(&segments[..2], 3, QueryMode::Both, None).unwrap();
    let conv = Conversation::new(
        DEFAULT_SYSTEM_PROMPT,
        tokens.ids.clone(),
        vec![Turn::new(REPORT_QUESTION, Some(&recs[0].report)), Turn::new("Anything else?", Some("No."))],
    )
    .unwrap();
    let conv = assemble(&conv, &hits, &RagOptions { k: 3, ..Default::default() }).unwrap();
    let opts = RenderOptions { max_len: 1024, ecg_budget: Some(256), pad: true };
    let bundle = render_and_label(&conv, &ByteTokenizer, &opts).unwrap();
    assert_eq!(bundle.input_ids.len(), 1024);
    let supervised: Vec<usize> = (0..bundle.labels.len()).filter(|&t| bundle.labels[t] != IGNORE_INDEX).collect();
    assert_eq!(supervised, scan_supervised(&bundle.input_ids[..bundle.content_len]));
}

#[test]
fn retrieval_echo_over_http_returns_own_report() {
    let recs: Vec<_> = (0..5).map(|i| synth_record(i, 9)).collect();
    let items: Vec<_> = recs
        .iter()
        .flat_map(|r| preprocess(&r.record).unwrap().into_iter().map(|s| (s, r.report.clone())))
        .collect();
    let db = RagDatabase::build(&items, BuildParams::default()).unwrap();
    let server = MockServer::start("127.0.0.1:0", MockMode::RetrievalEcho, MockServerOptions::default()).unwrap();
    let client = HttpGenerator::new(EndpointConfig::new(server.url())).unwrap();
    for (seg, report) in items.iter().step_by(2) {
        let hits = db.query(seg, 1, QueryMode::Both, None).unwrap();
        let conv = Conversation::new(DEFAULT_SYSTEM_PROMPT, vec![1, 2, 3], vec![Turn::new(REPORT_QUESTION, None)]).unwrap();
        let conv = assemble(&conv, &hits, &RagOptions::default()).unwrap();
        let (fitted, _) = fit(&conv, &ByteTokenizer, &RenderOptions::default()).unwrap();
        let reply = client.generate(&GenRequest::new(render_text(&fitted))).unwrap();
        assert_eq!(&reply.text, report);
    }
}
