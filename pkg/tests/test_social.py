import random

import pytest

from cogsim.envs.social import (
    Comment,
    Post,
    SocialAction,
    SocialEnv,
    SocialState,
    UserProfile,
    apply_social_action,
    build_feed,
    load_profiles,
    replay_events,
    seed_influencer,
    star_profiles,
)
from cogsim.errors import UnknownPost
from cogsim.protocol import ActionEnvelope, run_episode
from cogsim.seeds import child_rng


def simple_state(n=3, follows=None):
    profiles = {
        aid: UserProfile(agent=aid, bio=f"user {aid}", follows=set(follows.get(aid, [])) if follows else set())
        for aid in range(n)
    }
    return SocialState(profiles=profiles)


# --- actions ---------------------------------------------------------------------


def test_first_post_gets_id_one():
    state = simple_state()
    record = apply_social_action(SocialAction(kind="create_post", content="hi"), state, agent=0, time=0)
    assert record.info == {"content": "hi", "post_id": 1}
    assert state.posts[1].author == 0


def test_comment_recorded_under_post():
    state = simple_state()
    apply_social_action(SocialAction(kind="create_post", content="p"), state, agent=0, time=0)
    record = apply_social_action(
        SocialAction(kind="create_comment", content="c", target_post=1), state, agent=1, time=1
    )
    assert record.info["comment_id"] == 1
    assert record.info["post_id"] == 1
    assert state.comments[1].post_id == 1


def test_like_missing_post_raises_and_leaves_state():
    state = simple_state()
    with pytest.raises(UnknownPost):
        apply_social_action(SocialAction(kind="like_post", target_post=99), state, agent=0, time=0)
    assert not state.posts and not state.comments


def test_like_idempotent():
    state = simple_state()
    apply_social_action(SocialAction(kind="create_post", content="p"), state, agent=0, time=0)
    for _ in range(2):
        apply_social_action(SocialAction(kind="like_post", target_post=1), state, agent=1, time=1)
    assert state.posts[1].likes == {1}


def test_action_shape_validation():
    with pytest.raises(ValueError):
        SocialAction(kind="create_post")  # no content
    with pytest.raises(ValueError):
        SocialAction(kind="create_comment", content="x")  # no target
    with pytest.raises(ValueError):
        SocialAction(kind="retweet", content="x")


def test_no_self_follow():
    with pytest.raises(ValueError):
        UserProfile(agent=1, follows={1})


# --- feed ---------------------------------------------------------------------------


def feed_oracle(user, profiles, state, cap, now):
    """Brute-force filter-sort over the full post table."""
    rows = []
    for pid in sorted(state.posts):
        post = state.posts[pid]
        if now is not None and post.time > now:
            continue
        comments = [
            state.comments[cid]
            for cid in sorted(state.comments)
            if state.comments[cid].post_id == pid and (now is None or state.comments[cid].time <= now)
        ]
        visible = post.author in profiles[user].follows or (post.author == user and comments)
        if visible:
            rows.append((post, comments))
    rows.sort(key=lambda pc: (-pc[0].time, -pc[0].post_id))
    return rows[:cap]


def test_empty_feed_for_loner():
    state = simple_state()
    assert build_feed(0, state.profiles, state, cap=10) == []


def test_feed_recency_order_and_cap():
    state = simple_state(follows={0: [1]})
    for t in (1, 2, 3):
        apply_social_action(SocialAction(kind="create_post", content=f"t{t}"), state, agent=1, time=t)
    feed = build_feed(0, state.profiles, state, cap=2)
    assert [p.time for p, _ in feed] == [3, 2]


def test_own_post_with_reply_appears():
    state = simple_state(follows={1: [0]})
    apply_social_action(SocialAction(kind="create_post", content="mine"), state, agent=0, time=0)
    assert build_feed(0, state.profiles, state, cap=10) == []
    apply_social_action(SocialAction(kind="create_comment", content="re", target_post=1), state, agent=1, time=1)
    feed = build_feed(0, state.profiles, state, cap=10)
    assert len(feed) == 1
    assert feed[0][0].post_id == 1
    assert [c.comment_id for c in feed[0][1]] == [1]


def test_feed_matches_brute_force_oracle():
    rng = random.Random(13)
    for trial in range(30):
        n = 6
        follows = {aid: rng.sample([a for a in range(n) if a != aid], k=rng.randrange(0, n - 1)) for aid in range(n)}
        state = simple_state(n, follows=follows)
        for t in range(8):
            for aid in range(n):
                roll = rng.random()
                if roll < 0.4:
                    apply_social_action(SocialAction(kind="create_post", content=f"{aid}@{t}"), state, aid, t)
                elif roll < 0.6 and state.posts:
                    target = rng.choice(sorted(state.posts))
                    apply_social_action(
                        SocialAction(kind="create_comment", content="c", target_post=target), state, aid, t
                    )
        for user in range(n):
            cap = rng.randrange(0, 12)
            now = rng.randrange(0, 9)
            got = build_feed(user, state.profiles, state, cap=cap, now=now)
            want = feed_oracle(user, state.profiles, state, cap, now)
            assert [(p.post_id, [c.comment_id for c in cs]) for p, cs in got] == [
                (p.post_id, [c.comment_id for c in cs]) for p, cs in want
            ]


def test_feed_never_leaks_future():
    state = simple_state(follows={0: [1]})
    apply_social_action(SocialAction(kind="create_post", content="later"), state, agent=1, time=5)
    assert build_feed(0, state.profiles, state, cap=10, now=4) == []
    assert len(build_feed(0, state.profiles, state, cap=10, now=5)) == 1


# --- seeding -------------------------------------------------------------------------


def test_seed_influencer_post():
    state = simple_state()
    pid = seed_influencer(state, "report: amazon plans to open its first physical store in new york URL", influencer=0)
    assert pid == 1
    assert state.posts[1].author == 0
    assert state.posts[1].time == 0


def test_two_seeds_get_dense_ids():
    state = simple_state()
    assert seed_influencer(state, "one", influencer=0) == 1
    assert seed_influencer(state, "two", influencer=0) == 2


def test_star_profiles_follower_count():
    profiles = star_profiles(111, influencer=0)
    followers = sum(1 for p in profiles.values() if 0 in p.follows)
    assert followers == 110
    assert profiles[0].follows == set()


def test_profiles_file_loader():
    text = '{"agent_id": 0, "bio": "b", "follows": [1, 2]}\n{"agent_id": 1, "follows": []}\n'
    profiles = load_profiles(text)
    assert profiles[0].follows == {1, 2}
    assert profiles[1].bio == ""


# --- environment -----------------------------------------------------------------------


def scripted_social_policy(seed):
    def policy(obs):
        rng = child_rng(seed, "social-policy", obs.agent_id, obs.time)
        roll = rng.random()
        if roll < 0.25:
            body = {"kind": "create_post", "content": f"post by {obs.agent_id} at {obs.time}"}
        elif roll < 0.5 and "post " in obs.context_text:
            target = int(obs.context_text.split("post ")[1].split(" ")[0])
            body = {"kind": "create_comment", "content": "nice", "target_post": target}
        elif roll < 0.7 and "post " in obs.context_text:
            target = int(obs.context_text.split("post ")[1].split(" ")[0])
            body = {"kind": "like_post", "target_post": target}
        else:
            body = {"kind": "do_nothing"}
        return ActionEnvelope(agent_id=obs.agent_id, time=obs.time, body=body)

    return policy


def run_social(seed, n_agents=12, steps=6):
    env = SocialEnv(star_profiles(n_agents), seed_post="seed post about a store opening URL")
    agents = {aid: scripted_social_policy(seed) for aid in range(n_agents)}
    log = run_episode(env, agents, max_steps=steps, seed=seed)
    return env, log


def test_dense_ids_no_gaps():
    env, _ = run_social(3)
    assert sorted(env.state.posts) == list(range(1, len(env.state.posts) + 1))
    assert sorted(env.state.comments) == list(range(1, len(env.state.comments) + 1))


def test_replay_reconstructs_tables():
    env, log = run_social(5)
    rebuilt = replay_events(log.records, env.profiles)
    assert {p: (v.author, v.time, v.content) for p, v in rebuilt.posts.items()} == {
        p: (v.author, v.time, v.content) for p, v in env.state.posts.items()
    }
    assert {c: (v.post_id, v.author, v.content) for c, v in rebuilt.comments.items()} == {
        c: (v.post_id, v.author, v.content) for c, v in env.state.comments.items()
    }
    assert {p: v.likes for p, v in rebuilt.posts.items()} == {p: v.likes for p, v in env.state.posts.items()}


def test_comments_route_messages_to_post_author():
    env = SocialEnv(star_profiles(3), seed_post="hello followers")

    def commenter(obs):
        if obs.agent_id == 1 and obs.time == 0:
            return ActionEnvelope(
                agent_id=1, time=0, body={"kind": "create_comment", "content": "hi!", "target_post": 1}
            )
        return ActionEnvelope(agent_id=obs.agent_id, time=obs.time, body={"kind": "do_nothing"})

    env.reset()
    obs = env.step({aid: commenter(o) for aid, o in env._observations().items()})
    inbox = obs[0].inbox
    assert len(inbox) == 1
    assert inbox[0].src_agent_id == 1
    assert inbox[0].payload["kind"] == "comment"
    assert obs[1].inbox == [] and obs[2].inbox == []


def test_rejected_action_logged_and_state_unchanged():
    env = SocialEnv(star_profiles(2))

    def bad(obs):
        return ActionEnvelope(agent_id=obs.agent_id, time=obs.time, body={"kind": "like_post", "target_post": 42})

    env.reset()
    env.step({0: bad(o) for o in [env._observations()[0]]})
    rejects = [r for r in env.events.snapshot() if r.action == "reject_action"]
    assert rejects
    assert not env.state.posts


def test_event_info_fields_match_reference_shapes():
    env, log = run_social(7)
    for record in log.records:
        if record.action == "create_post":
            assert set(record.info) == {"content", "post_id"}
        elif record.action == "create_comment":
            assert set(record.info) == {"content", "comment_id", "post_id"}
        elif record.action == "like_post":
            assert set(record.info) == {"post_id"}
