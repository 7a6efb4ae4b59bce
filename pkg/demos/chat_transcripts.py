"""
Cleaning CHAT transcripts and turning them into token ids
==========================================================
"""

from multifuse.chat import build_vocab, clean_utterance, detokenize, parse_chat, tokenize

raw = """@UTF8
@Begin
@Participants:\tPAR Participant, INV Investigator
*INV:\tjust tell me what is happening .
*PAR:\tthe <boy> [//] the boy is &-um on the stool . \x1512000_15000\x15
%mor:\tdet|the n|boy
*PAR:\tand the (.) water is <running over> [/] running over .
*PAR:\txxx +...
@End
"""

# only the participant's turns, in file order
transcript = parse_chat(raw, speakers=("PAR",), source_id="demo")
for speaker, text in transcript.utterances:
    print(f"{speaker}: {text}")

# cleaning is idempotent
for line in ("the <boy> [//] the boy falls .", "&-uh cookies (..) ."):
    once = clean_utterance(line)
    assert clean_utterance(once) == once
    print(repr(line), "->", repr(once))

vocab = build_vocab([transcript.text])
seq = tokenize(transcript, vocab, max_len=24)
print("ids: ", seq.ids.tolist())
print("mask:", seq.attention_mask.tolist())
print("back:", " ".join(detokenize(seq, vocab)))
