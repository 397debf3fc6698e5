"""Exception hierarchy. Every error carries a stable code used by the CLI."""


class DexGeomError(Exception):
    code = "E_GENERIC"


class EmptyMesh(DexGeomError):
    code = "E_EMPTY_MESH"


class EmptyTarget(DexGeomError):
    code = "E_EMPTY_TARGET"


class InvalidMesh(DexGeomError):
    code = "E_INVALID_MESH"


class MalformedXml(DexGeomError):
    code = "E_MALFORMED_XML"


class CyclicKinematics(DexGeomError):
    code = "E_CYCLIC_KINEMATICS"


class MissingLink(DexGeomError):
    code = "E_MISSING_LINK"


class NonUnitAxis(DexGeomError):
    code = "E_NON_UNIT_AXIS"


class DimensionMismatch(DexGeomError):
    code = "E_DIMENSION_MISMATCH"


class MissingGeometry(DexGeomError):
    code = "E_MISSING_GEOMETRY"


class NonPositiveRadius(DexGeomError):
    code = "E_NON_POSITIVE_RADIUS"


class DegenerateAnchors(DexGeomError):
    code = "E_DEGENERATE_ANCHORS"


class RankDeficientFit(DexGeomError):
    code = "E_RANK_DEFICIENT_FIT"


class NoApproach(DexGeomError):
    code = "E_NO_APPROACH"


class CollisionInRegeneration(DexGeomError):
    code = "E_COLLISION_IN_REGENERATION"


class RetryExhausted(DexGeomError):
    code = "E_RETRY_EXHAUSTED"


class MissingPose(DexGeomError):
    code = "E_MISSING_POSE"


class UnmarkedTrajectory(DexGeomError):
    code = "E_UNMARKED_TRAJECTORY"


class ZeroVector(DexGeomError):
    code = "E_ZERO_VECTOR"


class NoValidSamples(DexGeomError):
    code = "E_NO_VALID_SAMPLES"


class EmptyCandidates(DexGeomError):
    code = "E_EMPTY_CANDIDATES"


class NoVisiblePoints(DexGeomError):
    code = "E_NO_VISIBLE_POINTS"


class FormatError(DexGeomError):
    code = "E_FORMAT"


class ConfigError(DexGeomError):
    code = "E_CONFIG"
