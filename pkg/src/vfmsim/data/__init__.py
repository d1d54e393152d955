from .blend import BlendSpec, SourceExhausted, blend
from .dedup import DistributionResult, RankLedger, assign_round_robin, dedup_assign_and_distribute
from .packing import PackedSequence, Segment, build_packed_mask, ffd, pack_sequences, pack_tokens, prefetch
from .shards import Sample, ShardFormatError, archived_size, load_manifest, read_shards, write_manifest, write_shards
