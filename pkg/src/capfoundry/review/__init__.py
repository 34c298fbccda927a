from capfoundry.review.app import ADMIN_TOKEN_ENV, create_app
from capfoundry.review.core import (
    DOMAIN_GROUPS,
    DuplicateVote,
    InvalidStudy,
    MissingCaption,
    NoVotes,
    ReviewError,
    ReviewService,
    Study,
    StudyItem,
    UnknownItem,
    UnknownRater,
    UnknownStudy,
    UnservedItem,
    Vote,
    aggregate_votes,
    left_source_for,
    rater_item_order,
)

__all__ = [
    "ADMIN_TOKEN_ENV",
    "DOMAIN_GROUPS",
    "DuplicateVote",
    "InvalidStudy",
    "MissingCaption",
    "NoVotes",
    "ReviewError",
    "ReviewService",
    "Study",
    "StudyItem",
    "UnknownItem",
    "UnknownRater",
    "UnknownStudy",
    "UnservedItem",
    "Vote",
    "aggregate_votes",
    "create_app",
    "left_source_for",
    "rater_item_order",
]
