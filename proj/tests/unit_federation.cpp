#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace sandwich;
using namespace sandwich::testutil;
namespace fs = std::filesystem;

namespace {

WireMessage sample_message() {
    WireMessage m;
    m.type = MsgType::features_fwd;
    m.direction = MsgDirection::node_to_server;
    m.phase = MsgPhase::train;
    m.step = 42;
    m.branch_id = "alpha";
    Tensorf feat({2, 3});
    for (int i = 0; i < 6; ++i) feat[i] = 0.5f * i - 1.0f;
    m.add_f32("features", feat);
    m.add_i32("set_index", {0, 0});
    return m;
}

}  // namespace

TEST(Wire, RoundTripPreservesEverything) {
    const WireMessage m = sample_message();
    const WireMessage back = decode_message(encode_message(m));
    EXPECT_EQ(back.type, m.type);
    EXPECT_EQ(back.direction, m.direction);
    EXPECT_EQ(back.phase, m.phase);
    EXPECT_EQ(back.step, m.step);
    EXPECT_EQ(back.branch_id, m.branch_id);
    ASSERT_EQ(back.fields.size(), 2u);
    EXPECT_EQ(back.fields[0].name, "features");
    EXPECT_EQ(back.fields[0].dims, (std::vector<int>{2, 3}));
    for (int i = 0; i < 6; ++i) EXPECT_EQ(back.fields[0].f32[i], m.fields[0].f32[i]);
    EXPECT_EQ(back.fields[1].i32, (std::vector<int>{0, 0}));
    EXPECT_EQ(back.require("set_index").dtype, FieldType::i32);
    EXPECT_EQ(back.find("nope"), nullptr);
    EXPECT_THROW(back.require("nope"), ValidationError);
}

TEST(Wire, DecodeRejectsMalformedFrames) {
    const auto good = encode_message(sample_message());

    EXPECT_THROW(decode_message({0x01, 0x02}), FormatError);  // shorter than prefix

    auto short_frame = good;
    short_frame.pop_back();  // length prefix no longer matches
    EXPECT_THROW(decode_message(short_frame), FormatError);

    auto bad_version = good;
    bad_version[4] = 9;
    EXPECT_THROW(decode_message(bad_version), FormatError);

    auto bad_type = good;
    bad_type[5] = 7;
    EXPECT_THROW(decode_message(bad_type), FormatError);

    auto trailing = good;
    trailing.push_back(0);
    trailing[0] = static_cast<std::uint8_t>(trailing.size() - 4);  // fix prefix, leave junk
    EXPECT_THROW(decode_message(trailing), FormatError);

    // unknown dtype: find the f32 marker after the "features" name
    auto bad_dtype = good;
    const std::string needle = "features";
    for (std::size_t i = 0; i + needle.size() < bad_dtype.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), bad_dtype.begin() + static_cast<std::ptrdiff_t>(i))) {
            bad_dtype[i + needle.size()] = 5;
            break;
        }
    EXPECT_THROW(decode_message(bad_dtype), FormatError);
}

TEST(Wire, EncodeChecksDimsAgainstPayload) {
    WireMessage m = sample_message();
    m.fields[0].dims = {4, 4};
    EXPECT_THROW(encode_message(m), ShapeError);
}

TEST(Sentinels, ScanFindsPlantedRuns) {
    SentinelRegistry reg;
    TrialTensor t;
    t.dataset_id = "x";
    t.data = Tensorf({2, 2, 16});
    for (std::int64_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(i) * 0.713f + 1.0f;
    t.labels = {0, 0};
    t.subject_index = {0, 0};
    reg.register_node_data("x", t, 4);
    EXPECT_EQ(reg.size(), 4u);

    // a payload embedding the first 8 raw floats must hit probe 0
    std::vector<std::uint8_t> payload(7, 0xAB);
    for (int k = 0; k < SentinelRegistry::kRunFloats; ++k) le::append(payload, t.data[k]);
    payload.push_back(0xCD);
    EXPECT_EQ(reg.scan(payload), "x#0");

    std::vector<std::uint8_t> clean(64, 0x11);
    EXPECT_EQ(reg.scan(clean), "");
}

TEST(Audit, LogSaveLoadRoundTrip) {
    AuditLog log;
    SentinelRegistry reg;
    WireMessage m = sample_message();
    log.append(m, encode_message(m), reg);
    WireMessage back;
    back.type = MsgType::grad_to_node;
    back.direction = MsgDirection::server_to_node;
    back.phase = MsgPhase::eval;
    back.step = 7;
    back.branch_id = "beta";
    back.add_f32("grad", Tensorf({1, 2}, 0.f));
    log.append(back, encode_message(back), reg);

    const fs::path path = fs::temp_directory_path() / "sandwich_audit_test.log";
    log.save(path);
    AuditLog loaded = AuditLog::load(path);
    ASSERT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded.records()[0].type, MsgType::features_fwd);
    EXPECT_EQ(loaded.records()[0].branch_id, "alpha");
    EXPECT_EQ(loaded.records()[1].phase, MsgPhase::eval);
    EXPECT_EQ(loaded.records()[1].fields[0].first, "grad");

    write_file_text(path, "{\"type\": \"mystery\"}\n");
    EXPECT_THROW(AuditLog::load(path), FormatError);
    write_file_text(path, "not json at all\n");
    EXPECT_THROW(AuditLog::load(path), FormatError);
    fs::remove(path);
}

TEST(Audit, TrainMessageCountFormula) {
    auto nodes = tiny_nodes();

    FedConfig ucfg = tiny_fed_config(TransferMode::none, HeadMode::unified);
    FederatedSystem<float> uni(ucfg, nodes);
    for (int i = 0; i < 3; ++i) uni.train_step();
    // 2 messages per node per step in unified mode
    EXPECT_EQ(uni.audit_log().size(), 3u * 2u * 2u);
    AuditVerdict uv = audit_check(uni.audit_log(), uni.audit_policy());
    EXPECT_TRUE(uv.clean()) << (uv.violations.empty() ? "" : uv.violations[0].message);
    EXPECT_EQ(uv.messages_checked, uni.audit_log().size());

    FedConfig mcfg = tiny_fed_config(TransferMode::deepset, HeadMode::multi);
    FederatedSystem<float> multi(mcfg, nodes);
    for (int i = 0; i < 3; ++i) multi.train_step();
    // 4 messages per node per step in multi mode
    EXPECT_EQ(multi.audit_log().size(), 3u * 4u * 2u);
    AuditVerdict mv = audit_check(multi.audit_log(), multi.audit_policy());
    EXPECT_TRUE(mv.clean()) << (mv.violations.empty() ? "" : mv.violations[0].message);

    // no labels field anywhere in multi mode
    for (const auto& r : multi.audit_log().records())
        for (const auto& [name, dtype] : r.fields) EXPECT_NE(name, "labels");
}

TEST(Audit, CountMismatchFlagged) {
    AuditLog log;
    SentinelRegistry reg;
    WireMessage m = sample_message();
    m.step = 0;
    log.append(m, encode_message(m), reg);  // one lone message in a 2-node step
    AuditPolicy policy;
    policy.unified_head = true;
    policy.n_nodes = 2;
    AuditVerdict v = audit_check(log, policy);
    ASSERT_FALSE(v.clean());
    EXPECT_NE(v.violations[0].message.find("protocol requires"), std::string::npos);
}

TEST(Audit, EvalGradMessagesFlagged) {
    AuditLog log;
    SentinelRegistry reg;
    WireMessage g;
    g.type = MsgType::grad_to_server;
    g.phase = MsgPhase::eval;
    g.step = 3;
    g.branch_id = "alpha";
    g.add_f32("grad", Tensorf({1}, 0.f));
    log.append(g, encode_message(g), reg);
    AuditPolicy policy;
    policy.n_nodes = 0;  // no train-count expectation
    AuditVerdict v = audit_check(log, policy);
    ASSERT_FALSE(v.clean());
    EXPECT_NE(v.violations[0].message.find("evaluation"), std::string::npos);
}

TEST(Privacy, LeakControlIsCaught) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config();
    FederatedSystem<float> sys(cfg, nodes);
    sys.set_leak_raw_samples(true);
    EXPECT_THROW(sys.train_step(), PrivacyViolationError);
    // the offending message is on the log with its sentinel hit
    bool hit = false;
    for (const auto& r : sys.audit_log().records())
        if (!r.sentinel_hit.empty()) hit = true;
    EXPECT_TRUE(hit);
}

TEST(Privacy, TamperedDisallowedFieldIsCaught) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::none, HeadMode::multi);
    FederatedSystem<float> sys(cfg, nodes);
    sys.tamper = [](WireMessage& m) {
        if (m.type == MsgType::features_fwd) m.add_i32("labels", {0, 1, 0, 1});
    };
    EXPECT_THROW(sys.train_step(), PrivacyViolationError);
}

TEST(Equivalence, FederatedMatchesMonolithicUnified) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::none, HeadMode::unified);
    FederatedSystem<float> fed(cfg, nodes);
    MonolithicSystem<float> mono(cfg, nodes);
    for (int i = 0; i < 10; ++i) {
        const StepStats fs = fed.train_step();
        const StepStats ms = mono.train_step();
        ASSERT_EQ(fs.loss, ms.loss) << "step " << i;
    }
}

TEST(Equivalence, FederatedMatchesMonolithicMultiWithPenalty) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::mmd, HeadMode::multi);
    cfg.alignment.lambda_weight = 0.5;
    FederatedSystem<float> fed(cfg, nodes);
    MonolithicSystem<float> mono(cfg, nodes);
    for (int i = 0; i < 6; ++i) {
        const StepStats fs = fed.train_step();
        const StepStats ms = mono.train_step();
        ASSERT_EQ(fs.loss, ms.loss) << "step " << i;
        ASSERT_EQ(fs.penalty, ms.penalty) << "step " << i;
    }
}

TEST(Training, DeterministicGivenSeedAndSensitiveToIt) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::deepset, HeadMode::unified);
    FederatedSystem<float> a(cfg, nodes), b(cfg, nodes);
    for (int i = 0; i < 4; ++i) ASSERT_EQ(a.train_step().loss, b.train_step().loss);

    FedConfig other = cfg;
    other.seed = 43;
    FederatedSystem<float> c(other, nodes);
    bool diverged = false;
    FederatedSystem<float> a2(cfg, nodes);
    for (int i = 0; i < 4; ++i) diverged |= a2.train_step().loss != c.train_step().loss;
    EXPECT_TRUE(diverged);
}

TEST(Training, GradientsReachEveryOwner) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::deepset, HeadMode::multi);
    FederatedSystem<float> sys(cfg, nodes);
    sys.capture_grads = true;
    sys.train_step();
    const auto& grads = sys.last_grads;
    bool branch_a = false, branch_b = false, trunk = false, head = false;
    double total_mag = 0.0;
    for (const auto& [name, g] : grads) {
        double mag = 0.0;
        for (std::int64_t i = 0; i < g.size(); ++i) mag += std::abs(static_cast<double>(g[i]));
        total_mag += mag;
        const std::string owner = ParamSet<float>::owner_of(name);
        if (owner == "branch:alpha" && mag > 0) branch_a = true;
        if (owner == "branch:beta" && mag > 0) branch_b = true;
        if (owner == "trunk" && mag > 0) trunk = true;
        if (owner.rfind("head:", 0) == 0 && mag > 0) head = true;
    }
    EXPECT_TRUE(branch_a);
    EXPECT_TRUE(branch_b);
    EXPECT_TRUE(trunk);
    EXPECT_TRUE(head);
    EXPECT_GT(total_mag, 0.0);
}

TEST(Training, EpochReportTracksBestAndRestores) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::none, HeadMode::unified);
    FederatedSystem<float> sys(cfg, nodes);
    TrainReport rep = sys.train(3);
    ASSERT_EQ(rep.epochs.size(), 3u);
    EXPECT_GE(rep.best_epoch, 0);
    EXPECT_LE(rep.best_epoch, 2);
    double best = 0.0;
    for (const auto& e : rep.epochs) best = std::max(best, e.val_accuracy);
    EXPECT_EQ(rep.best_val_accuracy, best);
    // restored parameters must reproduce the best accuracy exactly
    EXPECT_EQ(sys.validation_accuracy(), rep.best_val_accuracy);
    EXPECT_TRUE(rep.audit.clean());
}

TEST(Checkpoint, RoundTripRestoresBehaviour) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::deepset, HeadMode::multi);
    FederatedSystem<float> sys(cfg, nodes);
    sys.train(2);
    const fs::path dir = fs::temp_directory_path() / "sandwich_ckpt_test";
    fs::remove_all(dir);
    sys.save_checkpoint(dir);

    FederatedSystem<float> fresh(cfg, nodes);
    const double before = fresh.validation_accuracy();
    fresh.load_checkpoint(dir);
    EXPECT_EQ(fresh.validation_accuracy(), sys.validation_accuracy());

    const PredictOut a = sys.predict("beta", sys.val_trials("beta"));
    const PredictOut b = fresh.predict("beta", fresh.val_trials("beta"));
    ASSERT_EQ(a.logits.size(), b.logits.size());
    for (std::int64_t i = 0; i < a.logits.size(); ++i) ASSERT_EQ(a.logits[i], b.logits[i]);
    (void)before;

    // removing one owner file must fail the load with a routing error
    bool removed = false;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".params" &&
            entry.path().filename().string().rfind("branch_", 0) == 0) {
            fs::remove(entry.path());
            removed = true;
            break;
        }
    ASSERT_TRUE(removed);
    FederatedSystem<float> broken(cfg, nodes);
    EXPECT_THROW(broken.load_checkpoint(dir), RoutingError);
    fs::remove_all(dir);
}

TEST(Params, OwnerFileRejectsCorruption) {
    ParamSet<float> params(31);
    {
        Graph<float> g;
        ParamBinding<float> pb(g, params);
        pb.init("trunk/common/0/w", {4, 3}, 3);
        pb.init("trunk/common/0/b", {4}, 3);
    }
    const fs::path dir = fs::temp_directory_path() / "sandwich_params_test";
    fs::create_directories(dir);
    const fs::path file = dir / "trunk.params";
    params.save_owner("trunk", file);

    ParamSet<float> reload(0);
    reload.load_owner(file);
    EXPECT_TRUE(reload.contains("trunk/common/0/w"));
    for (std::int64_t i = 0; i < params.at("trunk/common/0/w").size(); ++i)
        EXPECT_EQ(reload.at("trunk/common/0/w")[i], params.at("trunk/common/0/w")[i]);

    auto bytes = read_file_bytes(file);
    bytes.back() ^= 0x01;
    write_file_bytes(file, bytes);
    ParamSet<float> bad(0);
    EXPECT_THROW(bad.load_owner(file), ChecksumError);

    bytes = read_file_bytes(file);
    bytes.resize(bytes.size() - 5);
    write_file_bytes(file, bytes);
    ParamSet<float> trunc(0);
    EXPECT_THROW(trunc.load_owner(file), IoError);

    write_file_bytes(dir / "tiny.params", {0x01, 0x02});
    ParamSet<float> tiny(0);
    EXPECT_THROW(tiny.load_owner(dir / "tiny.params"), FormatError);
    fs::remove_all(dir);
}

TEST(Sampler, SetsAreSubjectHomogeneous) {
    auto nodes = tiny_nodes();
    FedConfig cfg = tiny_fed_config(TransferMode::deepset, HeadMode::unified);
    FederatedSystem<float> sys(cfg, nodes);
    // peek at the wire: every features_fwd message carries set_index describing
    // batch_size/set_size equal groups
    sys.tamper = [&](WireMessage& m) {
        if (m.type != MsgType::features_fwd) return;
        const auto& sets = m.require("set_index").i32;
        ASSERT_EQ(sets.size(), 8u);
        std::map<int, int> counts;
        for (int s : sets) ++counts[s];
        for (const auto& [sid, c] : counts) ASSERT_EQ(c, 4) << "set " << sid;
    };
    for (int i = 0; i < 3; ++i) sys.train_step();
}

TEST(Sampler, RejectsImpossibleSetSplit) {
    auto nodes = tiny_nodes();
    // 2 subjects per node; a batch of 12 in sets of 4 needs 3 subjects
    FedConfig cfg = tiny_fed_config();
    cfg.batch_size = 12;
    cfg.set_size = 4;
    EXPECT_THROW(FederatedSystem<float>(cfg, nodes), ConfigError);
}

TEST(Config, ValidationCatchesBadSettings) {
    FedConfig cfg = tiny_fed_config();
    cfg.set_size = 3;  // does not divide 8
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_fed_config();
    cfg.target_id = "";
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_fed_config();
    cfg.learning_rate = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);

    auto nodes = tiny_nodes();
    cfg = tiny_fed_config();
    cfg.target_id = "gamma";  // not among the nodes
    EXPECT_THROW(FederatedSystem<float>(cfg, nodes), ConfigError);
}
