"""Offline stand-in for the youtube-transcript-api package.

Serves canned transcripts for the fixture videos so the pipeline can be
exercised without network access.
"""

from dataclasses import dataclass

__all__ = ["YouTubeTranscriptApi", "FetchedTranscriptSnippet", "NoTranscriptFound"]


class NoTranscriptFound(Exception):
    pass


@dataclass(frozen=True)
class FetchedTranscriptSnippet:
    text: str
    start: float
    duration: float


_TRANSCRIPTS = {
    "vr360dinos1": [
        ("Welcome aboard. Keep your headset on and look all around you.", 0.0, 4.2),
        ("We are drifting back through deep time, long before any people.", 4.2, 5.1),
        ("The ground shakes. Over the ridge come the dinosaurs.", 9.3, 4.0),
        ("100000000", 13.3, 1.6),
        ("That is how many years ago these giants ruled the land.", 14.9, 4.4),
        ("Now turn slowly to your left and watch the herd pass.", 19.3, 4.7),
    ],
}


class YouTubeTranscriptApi:
    def fetch(self, video_id, languages=("en",)):
        try:
            rows = _TRANSCRIPTS[video_id]
        except KeyError:
            raise NoTranscriptFound(video_id) from None
        return [FetchedTranscriptSnippet(t, s, d) for t, s, d in rows]

    def list(self, video_id):
        if video_id not in _TRANSCRIPTS:
            raise NoTranscriptFound(video_id)
        return ["en"]
